#include "nmt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include <json.hpp>

namespace nmt {

using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

void PairRecord::validate() const {
  const std::size_t m = truth.size();
  if (m == 0) throw ContractError("pair has no keypoints");
  image1.keypoints.validate();
  image2.keypoints.validate();
  if (image1.keypoints.size() != m || image2.keypoints.size() != m) {
    throw ContractError("pair: keypoint counts must match the truth permutation length");
  }
  std::set<std::size_t> seen;
  for (auto t : truth) {
    if (t >= m || !seen.insert(t).second) throw ContractError("pair: truth is not a permutation");
  }
  for (const auto* img : {&image1, &image2}) {
    if (img->latents && img->latents->rows() != m) {
      throw ContractError("pair: need one latent per keypoint");
    }
  }
}

Tensor latent_bundle(const SyntheticPairSpec& spec, int class_id) {
  std::mt19937_64 rng(splitmix64(spec.bundle_seed) ^ splitmix64(static_cast<std::uint64_t>(class_id) + 1));
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(spec.signal_dims)));
  Tensor protos = Tensor::matrix(spec.keypoint_types, spec.signal_dims);
  for (auto& v : protos.values()) v = normal(rng);
  return protos;
}

PairRecord generate_pair(const SyntheticPairSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const int class_id = spec.class_id >= 0
                           ? spec.class_id
                           : static_cast<int>(rng() % spec.num_classes);
  const std::size_t m =
      spec.m_min + static_cast<std::size_t>(rng() % (spec.m_max - spec.m_min + 1));

  std::vector<std::size_t> types(spec.keypoint_types);
  std::iota(types.begin(), types.end(), std::size_t{0});
  std::shuffle(types.begin(), types.end(), rng);
  types.resize(m);

  const double size = spec.image_size;
  Tensor c1 = Tensor::matrix(m, 2);
  for (auto& v : c1.values()) v = uniform(0.1 * size, 0.9 * size);

  // Similarity warp about the image centre; retry until >= 90% stay in bounds.
  std::normal_distribution<double> jitter(0.0, 1.0);
  Tensor c2 = Tensor::matrix(m, 2);
  const double centre = 0.5 * size;
  for (int attempt = 0;; ++attempt) {
    const double theta = uniform(-spec.rotation_deg, spec.rotation_deg) * std::numbers::pi / 180.0;
    const double s = uniform(spec.scale_min, spec.scale_max);
    const double tx = uniform(-spec.translation, spec.translation);
    const double ty = uniform(-spec.translation, spec.translation);
    std::size_t inside = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double x = c1(i, 0) - centre, y = c1(i, 1) - centre;
      c2(i, 0) = centre + s * (std::cos(theta) * x - std::sin(theta) * y) + tx + spec.jitter * jitter(rng);
      c2(i, 1) = centre + s * (std::sin(theta) * x + std::cos(theta) * y) + ty + spec.jitter * jitter(rng);
      inside += c2(i, 0) >= 0 && c2(i, 0) <= size && c2(i, 1) >= 0 && c2(i, 1) <= size;
    }
    if (10 * inside >= 9 * m || attempt >= 100) break;
  }

  const Tensor protos = latent_bundle(spec, class_id);
  const std::size_t sd = spec.signal_dims, ld = spec.latent_dim;
  std::normal_distribution<double> descriptor(0.0, spec.descriptor_noise / std::sqrt(double(sd)));
  std::normal_distribution<double> nuisance(
      0.0, ld > sd ? spec.nuisance / std::sqrt(static_cast<double>(ld - sd)) : 0.0);
  auto make_latents = [&]() {
    Tensor lat = Tensor::matrix(m, ld);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < sd; ++k) lat(i, k) = protos(types[i], k) + descriptor(rng);
      for (std::size_t k = sd; k < ld; ++k) lat(i, k) = nuisance(rng);
    }
    return lat;
  };
  Tensor lat1 = make_latents();
  Tensor lat2_ordered = make_latents();

  std::vector<std::size_t> sigma(m);
  std::iota(sigma.begin(), sigma.end(), std::size_t{0});
  if (spec.shuffle) std::shuffle(sigma.begin(), sigma.end(), rng);

  Tensor kp2 = Tensor::matrix(m, 2);
  Tensor lat2 = Tensor::matrix(m, ld);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(c2.row(i).begin(), c2.row(i).end(), kp2.row(sigma[i]).begin());
    std::copy(lat2_ordered.row(i).begin(), lat2_ordered.row(i).end(), lat2.row(sigma[i]).begin());
  }

  PairRecord pair;
  pair.class_id = class_id;
  pair.truth = sigma;
  const std::string id = "s" + std::to_string(seed);
  pair.image1.keypoints = KeypointSet{std::move(c1), id + "/1", std::nullopt};
  pair.image2.keypoints = KeypointSet{std::move(kp2), id + "/2", std::nullopt};
  pair.image1.latents = std::move(lat1);
  pair.image2.latents = std::move(lat2);
  pair.image1.render_seed = rng();
  pair.image2.render_seed = rng();
  pair.image1.render_noise = spec.render_noise;
  pair.image2.render_noise = spec.render_noise;
  return pair;
}

std::vector<PairRecord> generate_pairs(const SyntheticPairSpec& spec, std::size_t count,
                                       std::uint64_t seed) {
  std::vector<PairRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticPairSpec s = spec;
    if (s.class_id < 0) s.class_id = static_cast<int>(i % spec.num_classes);
    out.push_back(generate_pair(s, splitmix64(seed) + i));
  }
  return out;
}

namespace {

json matrix_json(const Tensor& t) {
  json rows = json::array();
  for (std::size_t i = 0; i < t.rows(); ++i) rows.push_back(std::vector<double>(t.row(i).begin(), t.row(i).end()));
  return rows;
}

Tensor matrix_from_json(const json& j, std::size_t cols_expected, const std::string& field) {
  if (!j.is_array() || j.empty()) throw ParseError("field '" + field + "': expected a non-empty array of rows");
  const std::size_t rows = j.size();
  const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
  if (cols == 0 || (cols_expected && cols != cols_expected)) {
    throw ParseError("field '" + field + "': rows must have " +
                     (cols_expected ? std::to_string(cols_expected) : std::string("equal")) +
                     " numeric entries");
  }
  Tensor t = Tensor::matrix(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!j[i].is_array() || j[i].size() != cols) {
      throw ParseError("field '" + field + "': row " + std::to_string(i) + " has the wrong length");
    }
    for (std::size_t k = 0; k < cols; ++k) {
      if (!j[i][k].is_number()) {
        throw ParseError("field '" + field + "': row " + std::to_string(i) + " entry " +
                         std::to_string(k) + " is not a number");
      }
      t(i, k) = j[i][k].get<double>();
    }
  }
  return t;
}

const json& require(const json& j, const char* field) {
  if (!j.contains(field)) throw ParseError(std::string("missing field '") + field + "'");
  return j.at(field);
}

}  // namespace

std::string pair_to_json_line(const PairRecord& pair) {
  json j;
  j["image_ids"] = {pair.image1.keypoints.image_id, pair.image2.keypoints.image_id};
  j["class_id"] = pair.class_id;
  j["keypoints1"] = matrix_json(pair.image1.keypoints.coords);
  j["keypoints2"] = matrix_json(pair.image2.keypoints.coords);
  j["truth"] = pair.truth;
  int idx = 1;
  for (const auto* img : {&pair.image1, &pair.image2}) {
    const std::string n = std::to_string(idx++);
    if (img->latents) {
      j["latents" + n] = matrix_json(*img->latents);
      j["render_seed" + n] = img->render_seed;
      j["render_noise" + n] = img->render_noise;
    } else {
      j["features" + n] = img->feature_file.string();
    }
  }
  return j.dump();
}

PairRecord parse_pair_line(const std::string& line, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("record is not a JSON object");
  try {
    PairRecord pair;
    const auto& ids = require(j, "image_ids");
    if (!ids.is_array() || ids.size() != 2 || !ids[0].is_string() || !ids[1].is_string()) {
      throw ParseError("field 'image_ids': expected two strings");
    }
    const auto& cls = require(j, "class_id");
    if (!cls.is_number_integer()) throw ParseError("field 'class_id': expected an integer");
    pair.class_id = cls.get<int>();
    const auto& truth = require(j, "truth");
    if (!truth.is_array()) throw ParseError("field 'truth': expected an array");
    for (const auto& t : truth) {
      if (!t.is_number_unsigned()) throw ParseError("field 'truth': expected non-negative integers");
      pair.truth.push_back(t.get<std::size_t>());
    }
    int idx = 1;
    for (ImageInput* img : {&pair.image1, &pair.image2}) {
      const std::string n = std::to_string(idx);
      img->keypoints.image_id = ids[idx - 1].get<std::string>();
      img->keypoints.coords = matrix_from_json(require(j, ("keypoints" + n).c_str()), 2, "keypoints" + n);
      if (j.contains("latents" + n)) {
        img->latents = matrix_from_json(j["latents" + n], 0, "latents" + n);
        if (j.contains("render_seed" + n)) {
          if (!j["render_seed" + n].is_number_unsigned()) {
            throw ParseError("field 'render_seed" + n + "': expected an unsigned integer");
          }
          img->render_seed = j["render_seed" + n].get<std::uint64_t>();
        }
        if (j.contains("render_noise" + n)) {
          if (!j["render_noise" + n].is_number()) throw ParseError("field 'render_noise" + n + "': expected a number");
          img->render_noise = j["render_noise" + n].get<double>();
        }
      } else if (j.contains("features" + n)) {
        if (!j["features" + n].is_string()) throw ParseError("field 'features" + n + "': expected a path");
        std::filesystem::path p(j["features" + n].get<std::string>());
        img->feature_file = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
      } else {
        throw ParseError("image " + n + " needs either 'latents" + n + "' or 'features" + n + "'");
      }
      ++idx;
    }
    try {
      pair.validate();
    } catch (const ContractError& e) {
      throw ParseError(e.what());
    }
    return pair;
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad field type: ") + e.what());
  }
}

void write_pairs(const std::filesystem::path& path, const std::vector<PairRecord>& pairs) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  for (const auto& p : pairs) os << pair_to_json_line(p) << '\n';
}

std::vector<PairRecord> read_pairs(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open " + path.string());
  std::vector<PairRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_pair_line(line, path.parent_path()));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace nmt
