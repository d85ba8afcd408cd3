#include "pseudoseg/split.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "pseudoseg/errors.hpp"

namespace pseudoseg::data {

Fraction Fraction::parse(const std::string& text) {
  const auto slash = text.find('/');
  try {
    Fraction f;
    if (slash == std::string::npos) {
      if (text.find('.') != std::string::npos) {
        // Decimal form, e.g. "0.0625" -> 625/10000 reduced.
        const auto dot = text.find('.');
        const std::string digits = text.substr(0, dot) + text.substr(dot + 1);
        f.num = std::stoll(digits);
        f.den = 1;
        for (std::size_t i = dot + 1; i < text.size(); ++i) f.den *= 10;
      } else {
        f.num = std::stoll(text);
        f.den = 1;
      }
    } else {
      f.num = std::stoll(text.substr(0, slash));
      f.den = std::stoll(text.substr(slash + 1));
    }
    const std::int64_t g = std::gcd(f.num, f.den);
    if (g > 1) {
      f.num /= g;
      f.den /= g;
    }
    check_config(f.den > 0 && f.num > 0 && f.num <= f.den,
                 "fraction must lie in (0,1]: " + text);
    return f;
  } catch (const std::invalid_argument&) {
    throw ConfigError("cannot parse fraction '" + text + "'");
  } catch (const std::out_of_range&) {
    throw ConfigError("fraction out of range '" + text + "'");
  }
}

DatasetSplit sample_low_data_split(const std::vector<std::string>& ids,
                                   const ClassCountsFn& class_counts, int num_classes,
                                   Fraction fraction, std::uint64_t seed, int min_class_pixels,
                                   int max_retries) {
  check_config(!ids.empty(), "split: empty id list");
  check_config(fraction.num > 0 && fraction.num <= fraction.den, "split: fraction not in (0,1]");
  const auto n_total = static_cast<std::int64_t>(ids.size());
  // ceil(fraction * n) in exact integer arithmetic
  const auto n_labeled =
      static_cast<std::size_t>((fraction.num * n_total + fraction.den - 1) / fraction.den);

  std::vector<std::string> pool = ids;
  std::vector<int> uncovered_last;
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    Rng rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(attempt)));
    // Fisher-Yates; only the first n_labeled entries matter.
    for (std::size_t i = 0; i + 1 < pool.size(); ++i) {
      const auto j = i + std::uniform_int_distribution<std::size_t>(0, pool.size() - 1 - i)(rng);
      std::swap(pool[i], pool[j]);
    }
    std::vector<std::int64_t> tally(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t i = 0; i < n_labeled; ++i) {
      const auto counts = class_counts(pool[i]);
      for (int c = 0; c < num_classes; ++c) tally[static_cast<std::size_t>(c)] += counts[c];
    }
    uncovered_last.clear();
    for (int c = 0; c < num_classes; ++c)
      if (tally[static_cast<std::size_t>(c)] < min_class_pixels) uncovered_last.push_back(c);
    if (uncovered_last.empty()) {
      DatasetSplit split;
      split.seed = seed;
      split.fraction = fraction;
      split.labeled_ids.assign(pool.begin(), pool.begin() + static_cast<std::int64_t>(n_labeled));
      std::sort(split.labeled_ids.begin(), split.labeled_ids.end());
      std::set<std::string> labeled(split.labeled_ids.begin(), split.labeled_ids.end());
      for (const auto& id : ids)
        if (!labeled.count(id)) split.unlabeled_ids.push_back(id);
      return split;
    }
  }
  std::string msg = "split: could not cover classes {";
  for (std::size_t i = 0; i < uncovered_last.size(); ++i) {
    if (i) msg += ",";
    msg += std::to_string(uncovered_last[i]);
  }
  msg += "} with " + std::to_string(min_class_pixels) + " pixels after " +
         std::to_string(max_retries) + " retries";
  throw SamplingError(msg);
}

void save_id_list(const std::filesystem::path& file, const std::vector<std::string>& ids) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write id list " + file.string());
  for (const auto& id : ids) out << id << "\n";
}

std::vector<std::string> load_id_list(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open id list " + file.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

}  // namespace pseudoseg::data
