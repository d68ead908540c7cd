#include "nmt/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "binary_io.hpp"

namespace nmt {

void FeatureMap::validate() const {
  if (grid.rank() != 3) throw ContractError("feature map grid must be H x W x c");
  if (!(stride > 0.0)) throw ContractError("feature map stride must be positive");
}

std::vector<BilinearTap> bilinear_taps(const FeatureMap& map, const std::array<double, 2>& point,
                                       SampleDiagnostics* diag) {
  const std::size_t h = map.height(), w = map.width();
  const double img_w = static_cast<double>(w) * map.stride;
  const double img_h = static_cast<double>(h) * map.stride;
  if (diag && (point[0] < 0.0 || point[1] < 0.0 || point[0] > img_w || point[1] > img_h)) {
    ++diag->clamped;
  }
  auto axis = [](double g, std::size_t n) {
    g = std::clamp(g, 0.0, static_cast<double>(n - 1));
    std::size_t lo = n > 1 ? std::min(static_cast<std::size_t>(std::floor(g)), n - 2) : 0;
    return std::pair{lo, g - static_cast<double>(lo)};
  };
  const auto [c0, fx] = axis(point[0] / map.stride - 0.5, w);
  const auto [r0, fy] = axis(point[1] / map.stride - 0.5, h);
  std::vector<BilinearTap> taps;
  taps.reserve(4);
  const std::size_t c1 = std::min(c0 + 1, w - 1), r1 = std::min(r0 + 1, h - 1);
  const BilinearTap all[4] = {{r0, c0, (1 - fy) * (1 - fx)},
                              {r0, c1, (1 - fy) * fx},
                              {r1, c0, fy * (1 - fx)},
                              {r1, c1, fy * fx}};
  for (const auto& t : all) {
    if (t.weight != 0.0) taps.push_back(t);
  }
  return taps;
}

std::vector<double> bilinear_sample(const FeatureMap& map, const std::array<double, 2>& point,
                                    SampleDiagnostics* diag) {
  map.validate();
  const std::size_t c = map.channels(), w = map.width();
  std::vector<double> out(c, 0.0);
  for (const auto& t : bilinear_taps(map, point, diag)) {
    const double* cell = map.grid.data() + (t.row * w + t.col) * c;
    for (std::size_t k = 0; k < c; ++k) out[k] += t.weight * cell[k];
  }
  return out;
}

Tensor extract_keypoint_features(const BackboneOutput& out, const KeypointSet& keypoints,
                                 std::size_t expected_width, SampleDiagnostics* diag) {
  if (out.width() != expected_width) {
    throw ConfigError("backbone width " + std::to_string(out.width()) +
                      " does not match configured input dimension " +
                      std::to_string(expected_width));
  }
  const std::size_t m = keypoints.size();
  const std::size_t cl = out.last.channels();
  Tensor f = Tensor::matrix(m, expected_width);
  for (std::size_t i = 0; i < m; ++i) {
    const std::array<double, 2> p{keypoints.coords(i, 0), keypoints.coords(i, 1)};
    const auto a = bilinear_sample(out.last, p, diag);
    const auto b = bilinear_sample(out.second_last, p, nullptr);
    auto row = f.row(i);
    std::copy(a.begin(), a.end(), row.begin());
    std::copy(b.begin(), b.end(), row.begin() + static_cast<std::ptrdiff_t>(cl));
  }
  return f;
}

void extract_keypoint_features_backward(const BackboneOutput& out, const KeypointSet& keypoints,
                                        const Tensor& dfeatures, BackboneOutput& dout) {
  const std::size_t cl = out.last.channels();
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    const std::array<double, 2> p{keypoints.coords(i, 0), keypoints.coords(i, 1)};
    auto g = dfeatures.row(i);
    for (int layer = 0; layer < 2; ++layer) {
      const FeatureMap& map = layer == 0 ? out.last : out.second_last;
      FeatureMap& dmap = layer == 0 ? dout.last : dout.second_last;
      const std::size_t c = map.channels(), off = layer == 0 ? 0 : cl;
      for (const auto& t : bilinear_taps(map, p)) {
        double* cell = dmap.grid.data() + (t.row * map.width() + t.col) * c;
        for (std::size_t k = 0; k < c; ++k) cell[k] += t.weight * g[off + k];
      }
    }
  }
}

namespace {

std::vector<double> spatial_mean(const FeatureMap& map) {
  const std::size_t c = map.channels(), cells = map.height() * map.width();
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < cells; ++i) {
    for (std::size_t k = 0; k < c; ++k) mean[k] += map.grid[i * c + k];
  }
  for (auto& v : mean) v /= static_cast<double>(cells);
  return mean;
}

Tensor as_cells(const Tensor& grid) {
  const auto& s = grid.shape();
  return Tensor({s[0] * s[1], s[2]}, grid.values());
}

}  // namespace

std::vector<double> pooled_features(const BackboneOutput& out) {
  auto a = spatial_mean(out.last);
  const auto b = spatial_mean(out.second_last);
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

GlobalToken::GlobalToken(ParameterStore& store, const std::string& name, std::size_t input_dim,
                         std::size_t d_model, std::mt19937_64& rng)
    : input_dim_(input_dim) {
  Tensor w = Tensor::matrix(input_dim, d_model);
  std::normal_distribution<double> normal(0.0, 0.1 / std::sqrt(static_cast<double>(input_dim)));
  for (auto& v : w.values()) v = normal(rng);
  proj_ = store.add(name + ".proj", std::move(w));
  bias_ = store.add(name + ".bias", Tensor::vector(d_model));
}

std::vector<double> GlobalToken::forward(const ParameterStore& params, const BackboneOutput& out,
                                         Cache* cache) const {
  auto pooled = pooled_features(out);
  if (pooled.size() != input_dim_) throw ConfigError("global token: backbone width mismatch");
  Tensor row({1, pooled.size()}, pooled);
  Tensor y = matmul(row, params.value(proj_));
  const Tensor& b = params.value(bias_);
  for (std::size_t k = 0; k < y.size(); ++k) y[k] += b[k];
  RowNormalized norm = normalize_rows(y);
  std::vector<double> g = norm.out.values();
  if (cache) *cache = Cache{std::move(pooled), std::move(norm)};
  return g;
}

void GlobalToken::backward(const ParameterStore& params, const Cache& cache,
                           std::span<const double> dglobal, GradientBuffer& grads,
                           BackboneOutput& dout) const {
  Tensor dg({1, dglobal.size()}, std::vector<double>(dglobal.begin(), dglobal.end()));
  Tensor dproj = normalize_rows_backward(cache.norm, dg);
  Tensor pooled({1, cache.pooled.size()}, cache.pooled);
  matmul_tn_acc(pooled, dproj, grads[proj_]);
  Tensor& db = grads[bias_];
  for (std::size_t k = 0; k < db.size(); ++k) db[k] += dproj[k];
  Tensor dpooled = matmul_nt(dproj, params.value(proj_));
  std::size_t off = 0;
  for (FeatureMap* map : {&dout.last, &dout.second_last}) {
    const std::size_t c = map->channels(), cells = map->height() * map->width();
    const double inv = 1.0 / static_cast<double>(cells);
    for (std::size_t i = 0; i < cells; ++i) {
      for (std::size_t k = 0; k < c; ++k) map->grid[i * c + k] += dpooled[off + k] * inv;
    }
    off += c;
  }
}

Tensor render_latents(const Tensor& latents, const KeypointSet& keypoints, std::size_t grid,
                      double stride, double sigma, double noise_level, std::uint64_t seed) {
  const std::size_t m = keypoints.size(), c = latents.cols();
  if (latents.rows() != m) throw ContractError("render_latents: one latent per keypoint required");
  if (noise_level < 0.0) throw ContractError("render_latents: noise level must be non-negative");
  Tensor out({grid, grid, c}, 0.0);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t r = 0; r < grid; ++r) {
    const double cy = (static_cast<double>(r) + 0.5) * stride;
    for (std::size_t q = 0; q < grid; ++q) {
      const double cx = (static_cast<double>(q) + 0.5) * stride;
      double* cell = out.data() + (r * grid + q) * c;
      for (std::size_t k = 0; k < m; ++k) {
        const double dx = cx - keypoints.coords(k, 0), dy = cy - keypoints.coords(k, 1);
        const double w = std::exp(-(dx * dx + dy * dy) * inv2s2);
        if (w < 1e-12) continue;
        auto lat = latents.row(k);
        for (std::size_t j = 0; j < c; ++j) cell[j] += w * lat[j];
      }
    }
  }
  if (noise_level > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, noise_level);
    for (auto& v : out.values()) v += normal(rng);
  }
  return out;
}

SyntheticBackbone::SyntheticBackbone(ParameterStore& store, const std::string& name,
                                     const SyntheticBackboneConfig& config, std::mt19937_64& rng)
    : config_(config) {
  auto init = [&](std::size_t out) {
    Tensor p = Tensor::matrix(config.latent_dim, out);
    if (out == config.latent_dim) {
      for (std::size_t i = 0; i < out; ++i) p(i, i) = 1.0;
    } else {
      std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(config.latent_dim)));
      for (auto& v : p.values()) v = normal(rng);
    }
    return p;
  };
  proj_last_ = store.add(name + ".proj_last", init(config.c_last), config.lr_scale);
  proj_second_ = store.add(name + ".proj_second", init(config.c_second), config.lr_scale);
}

std::array<Tensor, 2> SyntheticBackbone::render(const ImageInput& image) const {
  if (!image.latents) {
    throw ContractError("synthetic backbone: image " + image.keypoints.image_id + " has no latents");
  }
  if (image.latents->cols() != config_.latent_dim) {
    throw ConfigError("synthetic backbone: latent width " + std::to_string(image.latents->cols()) +
                      " differs from configured " + std::to_string(config_.latent_dim));
  }
  return {render_latents(*image.latents, image.keypoints, config_.grid, config_.stride,
                         config_.splat_sigma, image.render_noise, image.render_seed),
          render_latents(*image.latents, image.keypoints, config_.grid, config_.stride,
                         2.0 * config_.splat_sigma, image.render_noise, image.render_seed + 1)};
}

BackboneOutput SyntheticBackbone::run(const ParameterStore& params, const ImageInput& image) const {
  const auto grids = render(image);
  const std::size_t g = config_.grid;
  auto project = [&](const Tensor& grid, ParamId proj, LayerTag tag) {
    Tensor cells = matmul(as_cells(grid), params.value(proj));
    const std::size_t c = cells.cols();
    return FeatureMap{Tensor({g, g, c}, std::move(cells.values())), config_.stride, tag};
  };
  return {project(grids[0], proj_last_, LayerTag::Last),
          project(grids[1], proj_second_, LayerTag::SecondLast)};
}

void SyntheticBackbone::backward(const ParameterStore& /*params*/, const ImageInput& image,
                                 const BackboneOutput& dmaps, GradientBuffer& grads) const {
  const auto grids = render(image);
  matmul_tn_acc(as_cells(grids[0]), as_cells(dmaps.last.grid), grads[proj_last_]);
  matmul_tn_acc(as_cells(grids[1]), as_cells(dmaps.second_last.grid), grads[proj_second_]);
}

void write_feature_file(const std::filesystem::path& path, const BackboneOutput& out) {
  if (out.last.height() != out.second_last.height() || out.last.width() != out.second_last.width()) {
    throw ContractError("feature file: both maps must share one spatial grid");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os.write("NMTF", 4);
  binio::put_u32(os, kFeatureFileVersion);
  binio::put_u32(os, static_cast<std::uint32_t>(out.last.height()));
  binio::put_u32(os, static_cast<std::uint32_t>(out.last.width()));
  binio::put_u32(os, static_cast<std::uint32_t>(out.last.channels()));
  binio::put_u32(os, static_cast<std::uint32_t>(out.second_last.channels()));
  binio::put_f32(os, static_cast<float>(out.last.stride));
  for (double v : out.last.grid.values()) binio::put_f32(os, static_cast<float>(v));
  for (double v : out.second_last.grid.values()) binio::put_f32(os, static_cast<float>(v));
}

BackboneOutput read_feature_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open feature file " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "NMTF") throw ParseError(path.string() + ": bad magic");
  const auto version = binio::get_u32(is, "version");
  if (version != kFeatureFileVersion) {
    throw ParseError(path.string() + ": unsupported version " + std::to_string(version));
  }
  const std::size_t h = binio::get_u32(is, "H"), w = binio::get_u32(is, "W");
  const std::size_t cl = binio::get_u32(is, "c_last"), cs = binio::get_u32(is, "c_second");
  const double stride = binio::get_f32(is, "stride");
  if (h == 0 || w == 0 || cl == 0 || cs == 0 || !(stride > 0.0)) {
    throw ParseError(path.string() + ": invalid header");
  }
  auto read_grid = [&](std::size_t c, LayerTag tag, const char* what) {
    Tensor g({h, w, c});
    for (auto& v : g.values()) v = binio::get_f32(is, what);
    return FeatureMap{std::move(g), stride, tag};
  };
  BackboneOutput out;
  out.last = read_grid(cl, LayerTag::Last, "last-layer grid");
  out.second_last = read_grid(cs, LayerTag::SecondLast, "second-last grid");
  return out;
}

BackboneOutput FeatureFileBackbone::run(const ParameterStore& /*params*/,
                                        const ImageInput& image) const {
  if (image.feature_file.empty()) {
    throw ContractError("feature-file backbone: image " + image.keypoints.image_id +
                        " has no feature file");
  }
  return read_feature_file(image.feature_file);
}

}  // namespace nmt
