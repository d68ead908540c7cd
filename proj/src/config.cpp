#include "nmt/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace nmt {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_size(key, item));
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fmt(bool v) { return v ? "true" : "false"; }

}  // namespace

std::vector<ConfigEntry> parse_key_values(const std::string& text, const std::string& source) {
  std::vector<ConfigEntry> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    ConfigEntry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), lineno};
    if (e.key.empty()) throw ParseError(source + ":" + std::to_string(lineno) + ": empty key");
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<ConfigEntry> read_key_value_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_key_values(ss.str(), path.string());
}

void SyntheticPairSpec::validate() const {
  if (m_min < 1 || m_max < m_min) throw ConfigError("data: need 1 <= m_min <= m_max");
  if (keypoint_types < m_max) throw ConfigError("data: keypoint_types must be >= m_max");
  if (num_classes < 1) throw ConfigError("data: num_classes must be positive");
  if (signal_dims < 1 || signal_dims > latent_dim) {
    throw ConfigError("data: signal_dims must lie in [1, latent_dim]");
  }
  if (!(image_size > 0.0) || !(scale_min > 0.0) || scale_max < scale_min) {
    throw ConfigError("data: invalid image size or scale range");
  }
  if (jitter < 0.0 || descriptor_noise < 0.0 || nuisance < 0.0 || render_noise < 0.0) {
    throw ConfigError("data: noise levels must be non-negative");
  }
  if (class_id >= static_cast<int>(num_classes)) throw ConfigError("data: class_id out of range");
}

bool SyntheticPairSpec::apply(const std::string& key, const std::string& v) {
  static const std::map<std::string, std::function<void(SyntheticPairSpec&, const std::string&,
                                                        const std::string&)>>
      setters = {
          {"m_min", [](auto& s, auto& k, auto& x) { s.m_min = to_size(k, x); }},
          {"m_max", [](auto& s, auto& k, auto& x) { s.m_max = to_size(k, x); }},
          {"num_classes", [](auto& s, auto& k, auto& x) { s.num_classes = to_size(k, x); }},
          {"keypoint_types", [](auto& s, auto& k, auto& x) { s.keypoint_types = to_size(k, x); }},
          {"image_size", [](auto& s, auto& k, auto& x) { s.image_size = to_double(k, x); }},
          {"rotation_deg", [](auto& s, auto& k, auto& x) { s.rotation_deg = to_double(k, x); }},
          {"scale_min", [](auto& s, auto& k, auto& x) { s.scale_min = to_double(k, x); }},
          {"scale_max", [](auto& s, auto& k, auto& x) { s.scale_max = to_double(k, x); }},
          {"translation", [](auto& s, auto& k, auto& x) { s.translation = to_double(k, x); }},
          {"jitter", [](auto& s, auto& k, auto& x) { s.jitter = to_double(k, x); }},
          {"latent_dim", [](auto& s, auto& k, auto& x) { s.latent_dim = to_size(k, x); }},
          {"signal_dims", [](auto& s, auto& k, auto& x) { s.signal_dims = to_size(k, x); }},
          {"descriptor_noise", [](auto& s, auto& k, auto& x) { s.descriptor_noise = to_double(k, x); }},
          {"nuisance", [](auto& s, auto& k, auto& x) { s.nuisance = to_double(k, x); }},
          {"render_noise", [](auto& s, auto& k, auto& x) { s.render_noise = to_double(k, x); }},
          {"shuffle", [](auto& s, auto& k, auto& x) { s.shuffle = to_bool(k, x); }},
          {"bundle_seed", [](auto& s, auto& k, auto& x) { s.bundle_seed = to_u64(k, x); }},
          {"class_id", [](auto& s, auto& k, auto& x) { s.class_id = to_int(k, x); }},
      };
  auto it = setters.find(key);
  if (it == setters.end()) return false;
  it->second(*this, key, v);
  return true;
}

std::vector<std::pair<std::string, std::string>> SyntheticPairSpec::entries() const {
  return {{"m_min", std::to_string(m_min)},
          {"m_max", std::to_string(m_max)},
          {"num_classes", std::to_string(num_classes)},
          {"keypoint_types", std::to_string(keypoint_types)},
          {"image_size", fmt(image_size)},
          {"rotation_deg", fmt(rotation_deg)},
          {"scale_min", fmt(scale_min)},
          {"scale_max", fmt(scale_max)},
          {"translation", fmt(translation)},
          {"jitter", fmt(jitter)},
          {"latent_dim", std::to_string(latent_dim)},
          {"signal_dims", std::to_string(signal_dims)},
          {"descriptor_noise", fmt(descriptor_noise)},
          {"nuisance", fmt(nuisance)},
          {"render_noise", fmt(render_noise)},
          {"shuffle", fmt(shuffle)},
          {"bundle_seed", std::to_string(bundle_seed)},
          {"class_id", std::to_string(class_id)}};
}

SyntheticPairSpec spec_from_entries(const std::vector<ConfigEntry>& entries, std::size_t* count) {
  SyntheticPairSpec spec;
  for (const auto& e : entries) {
    if (e.key == "count") {
      if (!count) throw ConfigError("line " + std::to_string(e.line) + ": 'count' not allowed here");
      *count = to_size(e.key, e.value);
      continue;
    }
    if (!spec.apply(e.key, e.value)) {
      throw ConfigError("line " + std::to_string(e.line) + ": unknown key '" + e.key + "'");
    }
  }
  spec.validate();
  return spec;
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.d_model = 648;
  c.heads = 12;
  c.decoder_layers = 4;
  c.gnn_input_dim = 1024;
  c.kernel_size = 5;
  c.mlp_mult = 4;
  c.batch_size = 8;
  c.epochs = 6;
  c.data.m_min = 23;
  c.data.m_max = 23;
  c.data.keypoint_types = 23;
  return c;
}

void TrainConfig::validate() const {
  if (d_model == 0 || heads == 0 || decoder_layers == 0 || gnn_input_dim == 0 || mlp_mult == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % heads != 0) throw ConfigError("heads must divide d_model");
  if (kernel_size < 2) throw ConfigError("kernel_size must be at least 2");
  if (gnn_input_dim % 2 != 0) throw ConfigError("gnn_input_dim must be even (split across two maps)");
  if (backbone != "synthetic" && backbone != "file") {
    throw ConfigError("backbone must be 'synthetic' or 'file'");
  }
  if (batch_size == 0 || epochs == 0) throw ConfigError("batch_size and epochs must be positive");
  if (base_lr < 0.0 || backbone_lr_factor < 0.0 || lr_decay_factor < 0.0) {
    throw ConfigError("learning rates must be non-negative");
  }
  if (!(sinkhorn_temperature > 0.0) || sinkhorn_iters == 0) {
    throw ConfigError("sinkhorn temperature and iterations must be positive");
  }
  if (!(tau_init > 0.0)) throw ConfigError("tau_init must be positive");
  if (backbone_grid == 0 || !(backbone_stride > 0.0) || !(splat_sigma > 0.0)) {
    throw ConfigError("backbone grid, stride and splat_sigma must be positive");
  }
  data.validate();
}

LossConfig TrainConfig::loss_config() const {
  return LossConfig{layer_loss_p, infonce_mode, use_infonce, use_hyperspherical,
                    use_layer_hyperspherical};
}

TrainConfig TrainConfig::from_entries(const std::vector<ConfigEntry>& entries,
                                      const std::filesystem::path& base_dir) {
  TrainConfig c;
  for (const auto& e : entries) {
    if (e.key != "preset") continue;
    if (e.value == "desk") c = desk();
    else if (e.value == "paper") c = paper();
    else throw ConfigError("line " + std::to_string(e.line) + ": unknown preset '" + e.value + "'");
  }
  auto path = [&](const std::string& v) {
    std::filesystem::path p(v);
    return (p.is_relative() && !base_dir.empty() && !v.empty()) ? base_dir / p : p;
  };
  using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;
  static const std::map<std::string, Setter> setters = {
      {"d_model", [](auto& c, auto& k, auto& v) { c.d_model = to_size(k, v); }},
      {"heads", [](auto& c, auto& k, auto& v) { c.heads = to_size(k, v); }},
      {"decoder_layers", [](auto& c, auto& k, auto& v) { c.decoder_layers = to_size(k, v); }},
      {"gnn_input_dim", [](auto& c, auto& k, auto& v) { c.gnn_input_dim = to_size(k, v); }},
      {"kernel_size", [](auto& c, auto& k, auto& v) { c.kernel_size = to_size(k, v); }},
      {"mlp_mult", [](auto& c, auto& k, auto& v) { c.mlp_mult = to_size(k, v); }},
      {"backbone", [](auto& c, auto&, auto& v) { c.backbone = v; }},
      {"backbone_grid", [](auto& c, auto& k, auto& v) { c.backbone_grid = to_size(k, v); }},
      {"backbone_stride", [](auto& c, auto& k, auto& v) { c.backbone_stride = to_double(k, v); }},
      {"splat_sigma", [](auto& c, auto& k, auto& v) { c.splat_sigma = to_double(k, v); }},
      {"layer_loss_p", [](auto& c, auto& k, auto& v) { c.layer_loss_p = to_double(k, v); }},
      {"infonce_mode", [](auto& c, auto&, auto& v) { c.infonce_mode = parse_infonce_mode(v); }},
      {"tau_init", [](auto& c, auto& k, auto& v) { c.tau_init = to_double(k, v); }},
      {"use_infonce", [](auto& c, auto& k, auto& v) { c.use_infonce = to_bool(k, v); }},
      {"use_hyperspherical", [](auto& c, auto& k, auto& v) { c.use_hyperspherical = to_bool(k, v); }},
      {"use_layer_hyperspherical",
       [](auto& c, auto& k, auto& v) { c.use_layer_hyperspherical = to_bool(k, v); }},
      {"batch_size", [](auto& c, auto& k, auto& v) { c.batch_size = to_size(k, v); }},
      {"epochs", [](auto& c, auto& k, auto& v) { c.epochs = to_size(k, v); }},
      {"base_lr", [](auto& c, auto& k, auto& v) { c.base_lr = to_double(k, v); }},
      {"backbone_lr_factor", [](auto& c, auto& k, auto& v) { c.backbone_lr_factor = to_double(k, v); }},
      {"lr_decay_epochs", [](auto& c, auto& k, auto& v) { c.lr_decay_epochs = to_list(k, v); }},
      {"lr_decay_factor", [](auto& c, auto& k, auto& v) { c.lr_decay_factor = to_double(k, v); }},
      {"sinkhorn_temperature",
       [](auto& c, auto& k, auto& v) { c.sinkhorn_temperature = to_double(k, v); }},
      {"sinkhorn_iters", [](auto& c, auto& k, auto& v) { c.sinkhorn_iters = to_size(k, v); }},
      {"seed", [](auto& c, auto& k, auto& v) { c.seed = to_u64(k, v); }},
      {"threads", [](auto& c, auto& k, auto& v) { c.threads = to_size(k, v); }},
      {"train_pairs", [](auto& c, auto& k, auto& v) { c.train_pairs = to_size(k, v); }},
      {"val_pairs_per_class", [](auto& c, auto& k, auto& v) { c.val_pairs_per_class = to_size(k, v); }},
  };
  for (const auto& e : entries) {
    if (e.key == "preset") continue;
    try {
      if (e.key == "train_data") {
        c.train_data = path(e.value);
      } else if (e.key == "val_data") {
        c.val_data = path(e.value);
      } else if (e.key.rfind("data.", 0) == 0) {
        if (!c.data.apply(e.key.substr(5), e.value)) throw ConfigError("unknown key '" + e.key + "'");
      } else {
        auto it = setters.find(e.key);
        if (it == setters.end()) throw ConfigError("unknown key '" + e.key + "'");
        it->second(c, e.key, e.value);
      }
    } catch (const ConfigError& err) {
      throw ConfigError("line " + std::to_string(e.line) + ": " + err.what());
    }
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
  return from_entries(read_key_value_file(path), path.parent_path());
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << '\n'; };
  kv("d_model", std::to_string(d_model));
  kv("heads", std::to_string(heads));
  kv("decoder_layers", std::to_string(decoder_layers));
  kv("gnn_input_dim", std::to_string(gnn_input_dim));
  kv("kernel_size", std::to_string(kernel_size));
  kv("mlp_mult", std::to_string(mlp_mult));
  kv("backbone", backbone);
  kv("backbone_grid", std::to_string(backbone_grid));
  kv("backbone_stride", fmt(backbone_stride));
  kv("splat_sigma", fmt(splat_sigma));
  kv("layer_loss_p", fmt(layer_loss_p));
  kv("infonce_mode", to_string(infonce_mode));
  kv("tau_init", fmt(tau_init));
  kv("use_infonce", fmt(use_infonce));
  kv("use_hyperspherical", fmt(use_hyperspherical));
  kv("use_layer_hyperspherical", fmt(use_layer_hyperspherical));
  kv("batch_size", std::to_string(batch_size));
  kv("epochs", std::to_string(epochs));
  kv("base_lr", fmt(base_lr));
  kv("backbone_lr_factor", fmt(backbone_lr_factor));
  std::string decay;
  for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
    decay += (i ? "," : "") + std::to_string(lr_decay_epochs[i]);
  }
  kv("lr_decay_epochs", decay);
  kv("lr_decay_factor", fmt(lr_decay_factor));
  kv("sinkhorn_temperature", fmt(sinkhorn_temperature));
  kv("sinkhorn_iters", std::to_string(sinkhorn_iters));
  kv("seed", std::to_string(seed));
  kv("threads", std::to_string(threads));
  if (!train_data.empty()) kv("train_data", train_data.string());
  if (!val_data.empty()) kv("val_data", val_data.string());
  kv("train_pairs", std::to_string(train_pairs));
  kv("val_pairs_per_class", std::to_string(val_pairs_per_class));
  for (const auto& [k, v] : data.entries()) kv("data." + k, v);
  return os.str();
}

}  // namespace nmt
