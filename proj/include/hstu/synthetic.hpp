#pragma once

// Streaming synthetic dataset: items carry fixed categories, each record mixes
// a fresh Dirichlet prior over a few categories with a rich-get-richer draw,
// and the sampleable item-id range widens linearly over the stream so late
// records contain ids that early records cannot.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hstu/common.hpp"

namespace hstu {

struct DPConfig {
  std::size_t num_items = 2000;
  std::size_t num_categories = 20;
  std::size_t num_records = 50000;
  std::size_t record_length = 64;
  double train_fraction = 0.9;
  double initial_available_fraction = 0.4;
  std::size_t categories_per_record_max = 5;
  double alpha_lo = 1.0;
  double alpha_hi = 500.0;
  std::uint64_t seed = 0;

  static DPConfig full_scale() {
    DPConfig c;
    c.num_items = 20000;
    c.num_categories = 100;
    c.num_records = 1000000;
    c.record_length = 128;
    return c;
  }

  void validate() const {
    require(num_items >= 1 && num_categories >= 1 && num_records >= 1 && record_length >= 1,
            "dataset counts must be positive");
    require(categories_per_record_max >= 1, "categories per record must be positive");
    require(train_fraction > 0.0 && train_fraction < 1.0, "train fraction must lie in (0, 1)");
    require(initial_available_fraction > 0.0 && initial_available_fraction <= 1.0,
            "initial available fraction must lie in (0, 1]");
    require(alpha_lo > 0.0 && alpha_hi > alpha_lo, "alpha range must satisfy 0 < lo < hi");
    require(std::size_t(initial_available_fraction * double(num_items)) >= 1,
            "no items available at the start of the stream");
  }
};

// Highest sampleable id bound at record r: ids in [0, bound) are available.
// The range interpolates from the initial fraction to the whole vocabulary.
inline std::size_t availability_bound(const DPConfig& cfg, std::size_t record_index) {
  double frac = cfg.initial_available_fraction +
                (1.0 - cfg.initial_available_fraction) *
                    (double(record_index) / double(cfg.num_records));
  return std::size_t(std::floor(frac * double(cfg.num_items)));
}

// The mixture core, isolated for statistical tests: position i keeps the
// record's running category counts n_c and draws from the prior with
// probability alpha/(alpha+i), otherwise an existing category with
// probability n_c/(alpha+i). Position 0 always draws from the prior.
inline std::vector<std::size_t> dp_draw_categories(std::size_t len, double alpha,
                                                   const std::vector<double>& prior, Rng& rng) {
  require(!prior.empty(), "prior must cover at least one category");
  std::vector<std::size_t> out;
  out.reserve(len);
  std::vector<std::size_t> counts(prior.size(), 0);
  auto draw_prior = [&]() {
    double r = rng.uniform();
    double acc = 0;
    for (std::size_t c = 0; c < prior.size(); ++c) {
      acc += prior[c];
      if (r < acc) return c;
    }
    return prior.size() - 1;
  };
  for (std::size_t i = 0; i < len; ++i) {
    std::size_t c;
    double u = rng.uniform() * (alpha + double(i));
    if (u < alpha) {
      c = draw_prior();
    } else {
      double acc = alpha;
      c = prior.size() - 1;
      for (std::size_t k = 0; k < counts.size(); ++k) {
        acc += double(counts[k]);
        if (u < acc) {
          c = k;
          break;
        }
      }
    }
    counts[c] += 1;
    out.push_back(c);
  }
  return out;
}

struct DPDataset {
  std::vector<std::vector<std::uint64_t>> records;
  std::vector<std::uint64_t> item_category;  // fixed per dataset
};

// Draw order per record is part of the determinism contract: category count,
// category subset, Dirichlet prior, alpha, then the item draws.
inline DPDataset generate_dp_dataset(const DPConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  DPDataset ds;
  ds.item_category.resize(cfg.num_items);
  std::vector<std::vector<std::uint64_t>> cat_items(cfg.num_categories);
  for (std::size_t id = 0; id < cfg.num_items; ++id) {
    std::size_t c = std::size_t(rng.uniform_u64(cfg.num_categories));
    ds.item_category[id] = c;
    cat_items[c].push_back(id);  // ascending by construction
  }
  ds.records.reserve(cfg.num_records);
  std::vector<std::size_t> nonempty;
  std::vector<std::size_t> avail_count(cfg.num_categories);
  for (std::size_t r = 0; r < cfg.num_records; ++r) {
    std::size_t bound = availability_bound(cfg, r);
    nonempty.clear();
    for (std::size_t c = 0; c < cfg.num_categories; ++c) {
      auto it = std::upper_bound(cat_items[c].begin(), cat_items[c].end(), std::uint64_t(bound - 1));
      avail_count[c] = std::size_t(it - cat_items[c].begin());
      if (avail_count[c] > 0) nonempty.push_back(c);
    }
    require(!nonempty.empty(), "no category has available items");
    std::size_t want = 1 + std::size_t(rng.uniform_u64(cfg.categories_per_record_max));
    std::size_t k = std::min(want, nonempty.size());
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + std::size_t(rng.uniform_u64(nonempty.size() - i));
      std::swap(nonempty[i], nonempty[j]);
    }
    std::vector<std::size_t> chosen(nonempty.begin(), nonempty.begin() + std::ptrdiff_t(k));
    std::vector<double> prior = rng.dirichlet_flat(k);
    double alpha = cfg.alpha_lo + rng.uniform() * (cfg.alpha_hi - cfg.alpha_lo);
    std::vector<std::size_t> cats = dp_draw_categories(cfg.record_length, alpha, prior, rng);
    std::vector<std::uint64_t> items;
    items.reserve(cfg.record_length);
    for (std::size_t local : cats) {
      std::size_t c = chosen[local];
      std::size_t pick = std::size_t(rng.uniform_u64(avail_count[c]));
      items.push_back(cat_items[c][pick]);
    }
    ds.records.push_back(std::move(items));
  }
  return ds;
}

// Prefix split by record index, no shuffling; train size = floor(frac * count).
template <typename T>
inline std::pair<std::vector<T>, std::vector<T>> split_train_test(const std::vector<T>& records,
                                                                  double train_fraction) {
  require(train_fraction > 0.0 && train_fraction < 1.0, "train fraction must lie in (0, 1)");
  std::size_t cut = std::size_t(std::floor(train_fraction * double(records.size())));
  std::vector<T> train(records.begin(), records.begin() + std::ptrdiff_t(cut));
  std::vector<T> test(records.begin() + std::ptrdiff_t(cut), records.end());
  return {std::move(train), std::move(test)};
}

// JSON lines, one {"items":[...]} per record, after a '#' header echoing the
// generator config. Hand-formatted items keep the file byte-stable per seed.
inline void write_dp_dataset(const std::string& path, const DPConfig& cfg,
                             const std::vector<std::vector<std::uint64_t>>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset: " + path);
  nlohmann::json header = {{"num_items", cfg.num_items},
                           {"num_categories", cfg.num_categories},
                           {"num_records", cfg.num_records},
                           {"record_length", cfg.record_length},
                           {"train_fraction", cfg.train_fraction},
                           {"initial_available_fraction", cfg.initial_available_fraction},
                           {"categories_per_record_max", cfg.categories_per_record_max},
                           {"alpha_lo", cfg.alpha_lo},
                           {"alpha_hi", cfg.alpha_hi},
                           {"seed", cfg.seed}};
  out << "# " << header.dump() << "\n";
  for (const auto& rec : records) {
    out << "{\"items\":[";
    for (std::size_t i = 0; i < rec.size(); ++i) {
      if (i) out << ',';
      out << rec[i];
    }
    out << "]}\n";
  }
  if (!out) throw IoError("failed writing dataset: " + path);
}

inline std::vector<std::vector<std::uint64_t>> load_dp_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset: " + path);
  std::vector<std::vector<std::uint64_t>> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    records.push_back(j.at("items").get<std::vector<std::uint64_t>>());
  }
  return records;
}

}  // namespace hstu
