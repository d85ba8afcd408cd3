#include "pseudoseg/sgc.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "pseudoseg/errors.hpp"

namespace pseudoseg::sgc {

void FusionConfig::validate() const {
  check_config(gamma >= 0.0 && gamma <= 1.0, "fusion.gamma must be in [0,1]");
  check_config(temperature > 0.0 && temperature <= 1.0, "fusion.temperature must be in (0,1]");
  check_config(hard_threshold > 0.0 && hard_threshold < 1.0,
               "fusion.hard_threshold must be in (0,1)");
}

FusionConfig FusionConfig::preset(const std::string& name) {
  FusionConfig cfg;
  if (name == "low_data") {
    cfg.gamma = 0.5;
    cfg.temperature = 0.5;
  } else if (name == "high_data") {
    cfg.gamma = 0.3;
    cfg.temperature = 0.7;
  } else {
    throw ConfigError("unknown fusion preset '" + name + "' (expected low_data|high_data)");
  }
  return cfg;
}

AttentionParams::AttentionParams(int feature_dim, int embed_dim, int num_classes,
                                 net::ParamStore& store, Rng& rng)
    : feature_dim_(feature_dim),
      embed_dim_(embed_dim),
      num_classes_(num_classes),
      store_(&store) {
  check_config(feature_dim >= 1 && embed_dim >= 1 && num_classes >= 2,
               "attention: invalid dimensions");
  w_k_ = store.add("attention.w_k", net::he_normal({feature_dim, embed_dim}, feature_dim, rng));
  w_v_ = store.add("attention.w_v", net::he_normal({feature_dim, embed_dim}, feature_dim, rng));
  // Output map starts as identity so propagation is score-preserving.
  Tensor wc({num_classes, num_classes});
  for (int i = 0; i < num_classes; ++i) wc.at(i, i) = 1.0;
  w_c_ = store.add("attention.w_c", std::move(wc));
}

ad::Value AttentionParams::propagate(ad::Tape& tape, net::BoundParams& params, ad::Value m,
                                     ad::Value h) const {
  const Tensor& mv = m.v();
  const Tensor& hv = h.v();
  check_contract(mv.last_dim() == num_classes_, "sgc_propagate: class count mismatch");
  check_contract(hv.last_dim() == feature_dim_, "sgc_propagate: feature dim mismatch");
  check_contract(mv.rows() == hv.rows(), "sgc_propagate: spatial size mismatch");
  const int l = static_cast<int>(mv.rows());

  ad::Value mf = ad::reshape(m, {l, num_classes_});
  ad::Value hf = ad::reshape(h, {l, feature_dim_});
  ad::Value keys = ad::matmul(hf, params[w_k_]);
  ad::Value queries = ad::matmul(hf, params[w_v_]);
  ad::Value attention = ad::softmax_rows(ad::matmul_nt(keys, queries));
  ad::Value propagated = ad::add(mf, ad::matmul(attention, mf));
  ad::Value out = ad::matmul(propagated, params[w_c_]);
  return ad::reshape(out, mv.shape());
}

Tensor AttentionParams::propagate_plain(const Tensor& m, const Tensor& h) const {
  ad::Tape tape;
  net::BoundParams params(tape, *store_, /*requires_grad=*/false);
  return propagate(tape, params, tape.constant(m), tape.constant(h)).v();
}

double norm_factor(std::span<const double> p, std::span<const double> m, double eps) {
  check_contract(p.size() == m.size(), "norm_factor: length mismatch");
  // Separate accumulators plus one commutative add keep the result exactly
  // symmetric in (p, m) even under FMA contraction.
  double pp = 0.0, mm = 0.0;
  for (double v : p) pp += v * v;
  for (double v : m) mm += v * v;
  return std::max(std::sqrt(pp + mm), eps);
}

std::vector<double> sharpen(std::span<const double> p, double temperature) {
  if (temperature <= 0.0) throw ConfigError("sharpen: temperature must be > 0");
  std::vector<double> out(p.begin(), p.end());
  if (temperature == 1.0) return out;
  double z = 0.0;
  for (auto& v : out) {
    v = std::pow(v, 1.0 / temperature);
    z += v;
  }
  check_contract(z > 0.0, "sharpen: input must have positive mass");
  for (auto& v : out) v /= z;
  return out;
}

ad::Value sharpen_graph(ad::Value probs, double temperature) {
  if (temperature == 1.0) return probs;
  ad::Value u = ad::pow_const(probs, 1.0 / temperature);
  return ad::div_rows(u, ad::row_sum(u));
}

ad::Value fuse_graph(ad::Tape& tape, ad::Value p_logits, ad::Value m_logits,
                     const FusionConfig& cfg) {
  (void)tape;
  cfg.validate();
  check_contract(p_logits.v().same_shape(m_logits.v()), "fuse: shape mismatch " +
                                                            p_logits.v().shape_str() + " vs " +
                                                            m_logits.v().shape_str());
  ad::Value sq = ad::add(ad::row_sum(ad::mul(p_logits, p_logits)),
                         ad::row_sum(ad::mul(m_logits, m_logits)));
  // Floor before the square root so dead pixels stay finite in both passes.
  ad::Value norm = ad::pow_const(ad::clamp_min(sq, kNormEps * kNormEps), 0.5);
  ad::Value soft_p = ad::softmax_rows(ad::div_rows(p_logits, norm));
  ad::Value soft_m = ad::softmax_rows(ad::div_rows(m_logits, norm));
  ad::Value mix = ad::add(ad::scale(soft_p, cfg.gamma), ad::scale(soft_m, 1.0 - cfg.gamma));
  return sharpen_graph(mix, cfg.temperature);
}

PseudoLabel fuse(const Tensor& p_logits, const Tensor& m_logits, const FusionConfig& cfg) {
  ad::Tape tape;
  ad::Value y = fuse_graph(tape, tape.constant(p_logits), tape.constant(m_logits), cfg);
  PseudoLabel out;
  out.probs = y.v();
  if (cfg.mode == FusionConfig::Mode::hard) out.hardened = harden(out.probs, cfg.hard_threshold);
  return out;
}

data::LabelMask harden(const Tensor& probs, double threshold) {
  check_contract(threshold > 0.0 && threshold < 1.0, "harden: threshold must be in (0,1)");
  check_contract(probs.ndim() == 3, "harden: probs must be {H,W,C}");
  const int h = probs.dim(0), w = probs.dim(1), c = probs.dim(2);
  data::LabelMask mask = data::LabelMask::filled(h, w, data::kIgnoreValue);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
    int best = 0;
    double best_p = probs[i * c];
    for (int k = 1; k < c; ++k) {
      if (probs[i * c + k] > best_p) {
        best_p = probs[i * c + k];
        best = k;
      }
    }
    if (best_p > threshold) mask.classes[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(best);
  }
  return mask;
}

FusionVariant parse_variant(const std::string& name) {
  if (name == "decoder_only") return FusionVariant::decoder_only;
  if (name == "sgc_only") return FusionVariant::sgc_only;
  if (name == "mix_no_norm") return FusionVariant::mix_no_norm;
  if (name == "mix_no_sharpen") return FusionVariant::mix_no_sharpen;
  if (name == "full_no_norm_no_sharpen") return FusionVariant::full_no_norm_no_sharpen;
  if (name == "hard_decoder") return FusionVariant::hard_decoder;
  if (name == "full" || name == "calibrated_fusion") return FusionVariant::full;
  throw ConfigError("unknown fusion variant '" + name + "'");
}

std::string variant_name(FusionVariant v) {
  switch (v) {
    case FusionVariant::decoder_only: return "decoder_only";
    case FusionVariant::sgc_only: return "sgc_only";
    case FusionVariant::mix_no_norm: return "mix_no_norm";
    case FusionVariant::mix_no_sharpen: return "mix_no_sharpen";
    case FusionVariant::full_no_norm_no_sharpen: return "full_no_norm_no_sharpen";
    case FusionVariant::hard_decoder: return "hard_decoder";
    case FusionVariant::full: return "full";
  }
  return "?";
}

PseudoLabel fusion_variant(const Tensor& p_logits, const Tensor& m_logits,
                           const FusionConfig& cfg, FusionVariant variant) {
  cfg.validate();
  PseudoLabel out;
  switch (variant) {
    case FusionVariant::full:
      return fuse(p_logits, m_logits, cfg);
    case FusionVariant::decoder_only:
      out.probs = ad::softmax_rows_plain(p_logits);
      break;
    case FusionVariant::sgc_only:
      out.probs = ad::softmax_rows_plain(m_logits);
      break;
    case FusionVariant::hard_decoder: {
      out.probs = ad::softmax_rows_plain(p_logits);
      out.hardened = harden(out.probs, cfg.hard_threshold);
      break;
    }
    case FusionVariant::mix_no_norm:
    case FusionVariant::full_no_norm_no_sharpen: {
      ad::Tape tape;
      ad::Value sp = ad::softmax_rows(tape.constant(p_logits));
      ad::Value sm = ad::softmax_rows(tape.constant(m_logits));
      ad::Value mix = ad::add(ad::scale(sp, cfg.gamma), ad::scale(sm, 1.0 - cfg.gamma));
      if (variant == FusionVariant::mix_no_norm) mix = sharpen_graph(mix, cfg.temperature);
      out.probs = mix.v();
      break;
    }
    case FusionVariant::mix_no_sharpen: {
      FusionConfig no_sharpen = cfg;
      no_sharpen.temperature = 1.0;
      no_sharpen.mode = FusionConfig::Mode::soft;
      return fuse(p_logits, m_logits, no_sharpen);
    }
  }
  if (cfg.mode == FusionConfig::Mode::hard && !out.hardened)
    out.hardened = harden(out.probs, cfg.hard_threshold);
  return out;
}

void save_score_map(const std::filesystem::path& file, const Tensor& t) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write score map " + file.string());
  out.write("PSM1", 4);
  const std::int32_t nd = t.ndim();
  out.write(reinterpret_cast<const char*>(&nd), 4);
  for (int i = 0; i < nd; ++i) {
    const std::int32_t d = t.dim(i);
    out.write(reinterpret_cast<const char*>(&d), 4);
  }
  std::vector<float> buf(static_cast<std::size_t>(t.size()));
  for (std::int64_t i = 0; i < t.size(); ++i) buf[static_cast<std::size_t>(i)] =
      static_cast<float>(t[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

Tensor load_score_map(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open score map " + file.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "PSM1", 4) != 0)
    throw DataError("bad score map magic in " + file.string());
  std::int32_t nd = 0;
  in.read(reinterpret_cast<char*>(&nd), 4);
  if (!in || nd < 1 || nd > 8) throw DataError("bad score map rank in " + file.string());
  std::vector<int> shape(static_cast<std::size_t>(nd));
  for (auto& d : shape) {
    std::int32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    d = v;
  }
  Tensor t(shape);
  std::vector<float> buf(static_cast<std::size_t>(t.size()));
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!in) throw DataError("truncated score map " + file.string());
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = buf[static_cast<std::size_t>(i)];
  return t;
}

}  // namespace pseudoseg::sgc
