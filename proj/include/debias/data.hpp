#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/rng.hpp"
#include "debias/tensor.hpp"

namespace debias {

/// One labelled image: binary target y, binary protected attribute s, and
/// auxiliary binary attributes.
struct Example {
  TensorF image;  // 1 x 16 x 16, values in [0, 1]
  int y = 0;
  int s = 0;
  std::vector<int> aux;
};

struct Dataset {
  std::vector<Example> examples;
  std::vector<std::string> aux_names;

  std::size_t size() const { return examples.size(); }
};

/// Synthetic-generator configuration. The conditional rates default to the
/// bias of the reference face-attribute corpus this generator stands in for.
struct GenConfig {
  std::size_t n_train = 4000;
  std::size_t n_test = 1000;
  double p_y_given_s0 = 0.6791;
  double p_y_given_s1 = 0.2793;
  std::vector<double> aux_strengths;  // dependence d_j in [0,1] per attribute
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_train < 1 || n_test < 1) {
      throw std::invalid_argument("gen config: counts must be at least 1");
    }
    if (p_y_given_s0 < 0.0 || p_y_given_s0 > 1.0 || p_y_given_s1 < 0.0 ||
        p_y_given_s1 > 1.0) {
      throw std::invalid_argument("gen config: probabilities must lie in [0,1]");
    }
    for (double d : aux_strengths) {
      if (d < 0.0 || d > 1.0) {
        throw std::invalid_argument("gen config: aux strengths must lie in [0,1]");
      }
    }
    if (noise_sigma < 0.0) {
      throw std::invalid_argument("gen config: noise sigma must be non-negative");
    }
  }
};

// Fixed 2x2 marker anchors for auxiliary attributes; disjoint from each other,
// from the protected band (rows 2-4) and from the target square (5..10)^2.
inline constexpr std::size_t kAuxSlots = 8;
inline constexpr std::size_t kAuxAnchor[kAuxSlots][2] = {
    {0, 0}, {0, 14}, {14, 0}, {14, 14}, {0, 7}, {14, 7}, {7, 0}, {7, 14}};

/// Deterministic image composition: base 0.2; s=1 brightens rows 2-4 by 0.5;
/// y=1 brightens the centered 6x6 square by 0.4; aux j brightens its 2x2
/// marker by 0.3; then seeded Gaussian noise, clamped to [0,1].
inline TensorF render_example(int y, int s, const std::vector<int>& aux,
                              double noise_sigma, std::uint64_t noise_seed) {
  if (aux.size() > kAuxSlots) {
    throw std::invalid_argument("render_example: more aux attributes than marker slots");
  }
  TensorF img({1, 16, 16});
  img.fill(0.2f);
  auto pixel = [&](std::size_t r, std::size_t c) -> float& {
    return img[r * 16 + c];
  };
  if (s == 1) {
    for (std::size_t r = 2; r <= 4; ++r) {
      for (std::size_t c = 0; c < 16; ++c) pixel(r, c) += 0.5f;
    }
  }
  if (y == 1) {
    for (std::size_t r = 5; r <= 10; ++r) {
      for (std::size_t c = 5; c <= 10; ++c) pixel(r, c) += 0.4f;
    }
  }
  for (std::size_t j = 0; j < aux.size(); ++j) {
    if (aux[j] == 1) {
      for (std::size_t dr = 0; dr < 2; ++dr) {
        for (std::size_t dc = 0; dc < 2; ++dc) {
          pixel(kAuxAnchor[j][0] + dr, kAuxAnchor[j][1] + dc) += 0.3f;
        }
      }
    }
  }
  if (noise_sigma > 0.0) {
    RandomStream rng(noise_seed);
    for (std::size_t i = 0; i < img.size(); ++i) {
      img[i] = static_cast<float>(std::clamp(
          static_cast<double>(img[i]) + rng.normal(0.0, noise_sigma), 0.0, 1.0));
    }
  } else {
    for (std::size_t i = 0; i < img.size(); ++i) {
      img[i] = std::clamp(img[i], 0.0f, 1.0f);
    }
  }
  return img;
}

namespace detail {

inline Example synth_example(const GenConfig& cfg, std::uint64_t example_seed) {
  RandomStream rng(example_seed);
  Example ex;
  ex.s = rng.bernoulli(0.5) ? 1 : 0;
  ex.y = rng.bernoulli(ex.s == 1 ? cfg.p_y_given_s1 : cfg.p_y_given_s0) ? 1 : 0;
  ex.aux.resize(cfg.aux_strengths.size());
  for (std::size_t j = 0; j < cfg.aux_strengths.size(); ++j) {
    const bool agree = rng.bernoulli((1.0 + cfg.aux_strengths[j]) / 2.0);
    ex.aux[j] = agree ? ex.y : 1 - ex.y;
  }
  ex.image = render_example(ex.y, ex.s, ex.aux, cfg.noise_sigma, rng.next_u64());
  return ex;
}

inline std::vector<std::string> default_aux_names(std::size_t m) {
  std::vector<std::string> names(m);
  for (std::size_t j = 0; j < m; ++j) names[j] = "A" + std::to_string(j + 1);
  return names;
}

}  // namespace detail

/// Seeded biased dataset: s ~ Bernoulli(1/2), y ~ Bernoulli(p_y_given_s),
/// aux_j agrees with y with probability (1+d_j)/2. Example i of the train
/// split uses derived seed (seed + i); the test split continues after it, so
/// the splits never share a seed.
inline std::pair<Dataset, Dataset> synth_generate(const GenConfig& cfg) {
  cfg.validate();
  Dataset train, test;
  train.aux_names = detail::default_aux_names(cfg.aux_strengths.size());
  test.aux_names = train.aux_names;
  train.examples.reserve(cfg.n_train);
  test.examples.reserve(cfg.n_test);
  for (std::size_t i = 0; i < cfg.n_train; ++i) {
    train.examples.push_back(detail::synth_example(cfg, cfg.seed + i));
  }
  for (std::size_t i = 0; i < cfg.n_test; ++i) {
    test.examples.push_back(detail::synth_example(cfg, cfg.seed + cfg.n_train + i));
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Attribute files (CelebA list format)
// ---------------------------------------------------------------------------
// Line 1: row count. Line 2: attribute names. Each further line: filename
// followed by one +1/-1 token per attribute; -1 maps to bit 0.

struct AttrTable {
  std::vector<std::string> attribute_names;
  std::vector<std::string> filenames;             // in file order
  std::vector<std::vector<int>> bits;             // per row, per attribute

  std::size_t attribute_index(const std::string& name) const {
    for (std::size_t i = 0; i < attribute_names.size(); ++i) {
      if (attribute_names[i] == name) return i;
    }
    throw std::invalid_argument("attr table: no attribute named " + name);
  }
};

inline AttrTable load_attr_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("attr file: cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("attr file: missing count line");
  std::size_t declared = 0;
  try {
    declared = std::stoul(line);
  } catch (const std::exception&) {
    throw std::runtime_error("attr file: first line must be a row count");
  }
  if (!std::getline(is, line)) throw std::runtime_error("attr file: missing header line");
  AttrTable table;
  {
    std::istringstream hs(line);
    std::string token;
    while (hs >> token) table.attribute_names.push_back(token);
  }
  if (table.attribute_names.empty()) {
    throw std::runtime_error("attr file: header names no attributes");
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream rs(line);
    std::string filename;
    rs >> filename;
    std::vector<int> row;
    std::string token;
    while (rs >> token) {
      if (token == "1") {
        row.push_back(1);
      } else if (token == "-1") {
        row.push_back(0);
      } else {
        throw std::runtime_error("attr file: value token '" + token +
                                 "' is not in {-1, 1}");
      }
    }
    if (row.size() != table.attribute_names.size()) {
      throw std::runtime_error("attr file: row for " + filename +
                               " is missing attribute columns");
    }
    table.filenames.push_back(filename);
    table.bits.push_back(std::move(row));
  }
  if (table.filenames.size() != declared) {
    throw std::runtime_error("attr file: declared count " + std::to_string(declared) +
                             " does not match " + std::to_string(table.filenames.size()) +
                             " body rows");
  }
  return table;
}

// ---------------------------------------------------------------------------
// PGM images (binary "P5", 16x16, 8-bit)
// ---------------------------------------------------------------------------

namespace detail {

// Reads one header token, skipping whitespace and '#' comments.
inline std::string pgm_token(std::istream& is) {
  std::string tok;
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (std::isspace(c)) {
      if (!tok.empty()) {
        is.unget();
        break;
      }
    } else {
      tok.push_back(static_cast<char>(c));
    }
    c = is.get();
  }
  // The final consumed character was the single whitespace after the token.
  return tok;
}

}  // namespace detail

inline TensorF load_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("pgm: cannot open " + path.string());
  if (detail::pgm_token(is) != "P5") {
    throw std::runtime_error("pgm: " + path.string() + " is not a binary PGM (P5)");
  }
  const std::string w = detail::pgm_token(is);
  const std::string h = detail::pgm_token(is);
  const std::string maxval = detail::pgm_token(is);
  is.get();  // single whitespace before pixel data
  if (w != "16" || h != "16") {
    throw std::runtime_error("pgm: " + path.string() + " is " + w + "x" + h +
                             ", expected 16x16");
  }
  if (maxval != "255") {
    throw std::runtime_error("pgm: " + path.string() + " must be 8-bit (maxval 255)");
  }
  unsigned char bytes[256];
  if (!is.read(reinterpret_cast<char*>(bytes), 256)) {
    throw std::runtime_error("pgm: " + path.string() + " truncated pixel data");
  }
  TensorF img({1, 16, 16});
  for (std::size_t i = 0; i < 256; ++i) {
    img[i] = static_cast<float>(bytes[i]) / 255.0f;
  }
  return img;
}

inline void save_pgm(const TensorF& img, const std::filesystem::path& path) {
  if (img.size() != 256) throw std::invalid_argument("pgm: expected a 1x16x16 image");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("pgm: cannot open " + path.string() + " for writing");
  os << "P5\n16 16\n255\n";
  unsigned char bytes[256];
  for (std::size_t i = 0; i < 256; ++i) {
    const long q = std::lround(static_cast<double>(img[i]) * 255.0);
    bytes[i] = static_cast<unsigned char>(std::clamp(q, 0L, 255L));
  }
  os.write(reinterpret_cast<const char*>(bytes), 256);
  if (!os) throw std::runtime_error("pgm: write failed for " + path.string());
}

/// Loads every row of the attribute table as an example. The named target
/// and protected columns become y and s; all other columns become aux.
inline Dataset load_pgm_dataset(const std::filesystem::path& image_dir,
                                const AttrTable& table,
                                const std::string& target_name,
                                const std::string& protected_name) {
  const std::size_t yi = table.attribute_index(target_name);
  const std::size_t si = table.attribute_index(protected_name);
  Dataset ds;
  for (std::size_t i = 0; i < table.attribute_names.size(); ++i) {
    if (i != yi && i != si) ds.aux_names.push_back(table.attribute_names[i]);
  }
  ds.examples.reserve(table.filenames.size());
  for (std::size_t r = 0; r < table.filenames.size(); ++r) {
    const std::filesystem::path img_path = image_dir / table.filenames[r];
    if (!std::filesystem::exists(img_path)) {
      throw std::runtime_error("dataset: image " + table.filenames[r] +
                               " listed in attribute file is missing on disk");
    }
    Example ex;
    ex.image = load_pgm(img_path);
    ex.y = table.bits[r][yi];
    ex.s = table.bits[r][si];
    for (std::size_t i = 0; i < table.attribute_names.size(); ++i) {
      if (i != yi && i != si) ex.aux.push_back(table.bits[r][i]);
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

/// Persists a dataset as a directory of PGMs plus one attribute file in the
/// list format above, with columns Y, S, then the aux names.
inline void save_pgm_dataset(const Dataset& ds, const std::filesystem::path& image_dir,
                             const std::filesystem::path& attr_path) {
  std::filesystem::create_directories(image_dir);
  std::ofstream os(attr_path);
  if (!os) throw std::runtime_error("dataset: cannot open " + attr_path.string());
  os << ds.examples.size() << "\n";
  os << "Y S";
  for (const auto& name : ds.aux_names) os << " " << name;
  os << "\n";
  char buf[16];
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%06zu.pgm", i);
    save_pgm(ds.examples[i].image, image_dir / buf);
    os << buf << " " << (ds.examples[i].y == 1 ? "1" : "-1") << " "
       << (ds.examples[i].s == 1 ? "1" : "-1");
    for (int a : ds.examples[i].aux) os << " " << (a == 1 ? "1" : "-1");
    os << "\n";
  }
  if (!os) throw std::runtime_error("dataset: write failed for " + attr_path.string());
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Seeded Fisher-Yates shuffle into batches of index lists. A final batch
/// smaller than 2 is dropped (the HSIC estimator needs n >= 2).
inline std::vector<std::vector<std::size_t>> batch_iter(const Dataset& ds,
                                                        std::size_t batch_size,
                                                        std::uint64_t shuffle_seed) {
  if (batch_size < 2) throw std::invalid_argument("batch_iter: batch size must be >= 2");
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  RandomStream rng(shuffle_seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (end - start < 2) break;
    batches.emplace_back(order.begin() + static_cast<long>(start),
                         order.begin() + static_cast<long>(end));
  }
  return batches;
}

/// Assembles the image tensor of a batch.
inline TensorF batch_images(const Dataset& ds, const std::vector<std::size_t>& idx) {
  TensorF out({idx.size(), 1, 16, 16});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const TensorF& img = ds.examples[idx[i]].image;
    std::copy_n(img.data(), 256, out.data() + i * 256);
  }
  return out;
}

/// Label vector of a batch: y, s, or aux attribute j.
enum class LabelKind { Target, Protected, Aux };

inline TensorF batch_labels(const Dataset& ds, const std::vector<std::size_t>& idx,
                            LabelKind kind, std::size_t aux_index = 0) {
  TensorF out({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Example& ex = ds.examples[idx[i]];
    const int v = kind == LabelKind::Target      ? ex.y
                  : kind == LabelKind::Protected ? ex.s
                                                 : ex.aux.at(aux_index);
    out[i] = static_cast<float>(v);
  }
  return out;
}

}  // namespace debias
