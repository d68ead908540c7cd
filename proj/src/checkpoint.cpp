#include "nmt/checkpoint.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "binary_io.hpp"

namespace nmt {

namespace {

void put_array(std::ostream& os, const std::string& name, const Tensor& t) {
  binio::put_bytes(os, name);
  binio::put_u32(os, static_cast<std::uint32_t>(t.shape().size()));
  for (std::size_t d : t.shape()) binio::put_u64(os, d);
  binio::put_u64(os, t.size());
  for (std::size_t i = 0; i < t.size(); ++i) binio::put_f32(os, static_cast<float>(t[i]));
}

std::string get_string(std::istream& is, const std::string& what) {
  const std::uint32_t n = binio::get_u32(is, what + " length");
  if (n > (1u << 24)) throw ParseError("implausible length for " + what);
  std::string s(n, '\0');
  is.read(s.data(), n);
  binio::need(is, what);
  return s;
}

Tensor get_array(std::istream& is, std::string& name) {
  name = get_string(is, "array name");
  const std::uint32_t ndim = binio::get_u32(is, name + " rank");
  if (ndim > 8) throw ParseError("array " + name + ": bad rank");
  std::vector<std::size_t> shape(ndim);
  std::size_t expected = 1;
  for (auto& d : shape) {
    d = binio::get_u64(is, name + " dims");
    expected *= d;
  }
  const std::uint64_t count = binio::get_u64(is, name + " count");
  if (count != expected) throw ParseError("array " + name + ": count does not match shape");
  Tensor t(shape, 0.0);
  for (std::size_t i = 0; i < count; ++i) t[i] = binio::get_f32(is, name);
  return t;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const MatchingModel& model,
                     const Adam* optimizer, std::size_t epoch,
                     const std::vector<EpochMetrics>& history) {
  std::ostringstream os;
  os.write("NMTC", 4);
  binio::put_u32(os, kCheckpointVersion);
  binio::put_bytes(os, model.config().to_text());
  binio::put_u32(os, static_cast<std::uint32_t>(epoch));

  const auto& params = model.params();
  std::uint32_t arrays = static_cast<std::uint32_t>(params.size());
  if (optimizer) arrays *= 3;
  binio::put_u32(os, arrays);
  for (const auto& p : params) put_array(os, "param/" + p.name, p.value);
  if (optimizer) {
    std::size_t i = 0;
    for (const auto& p : params) put_array(os, "adam.m/" + p.name, optimizer->first_moments()[i++]);
    i = 0;
    for (const auto& p : params) put_array(os, "adam.v/" + p.name, optimizer->second_moments()[i++]);
  }
  binio::put_u64(os, optimizer ? optimizer->step_count() : 0);

  binio::put_u32(os, static_cast<std::uint32_t>(history.size()));
  for (const auto& m : history) {
    binio::put_u32(os, static_cast<std::uint32_t>(m.epoch));
    binio::put_f64(os, m.lr);
    binio::put_f64(os, m.train_loss);
    binio::put_f64(os, m.val_accuracy);
  }

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    const std::string bytes = os.str();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "NMTC") throw ParseError(path.string() + ": not a checkpoint");
  const std::uint32_t version = binio::get_u32(is, "version");
  if (version != kCheckpointVersion) {
    throw ParseError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::string config_text = get_string(is, "config block");

  LoadedCheckpoint ck;
  ck.config = TrainConfig::from_entries(parse_key_values(config_text, path.string() + "[config]"));
  ck.epoch = binio::get_u32(is, "epoch");
  ck.model = std::make_unique<MatchingModel>(ck.config, ck.config.seed);
  auto& params = ck.model->params();

  const std::uint32_t arrays = binio::get_u32(is, "array count");
  std::map<std::string, Tensor> stored;
  for (std::uint32_t i = 0; i < arrays; ++i) {
    std::string name;
    Tensor t = get_array(is, name);
    stored.emplace(std::move(name), std::move(t));
  }
  const std::uint64_t step = binio::get_u64(is, "optimizer step");

  ck.optimizer = Adam(params);
  std::size_t idx = 0;
  for (auto& p : params) {
    auto it = stored.find("param/" + p.name);
    if (it == stored.end()) throw ParseError(path.string() + ": missing array param/" + p.name);
    if (it->second.shape() != p.value.shape()) {
      throw ParseError(path.string() + ": shape mismatch for " + p.name);
    }
    p.value = it->second;
    auto m = stored.find("adam.m/" + p.name);
    auto v = stored.find("adam.v/" + p.name);
    if (m != stored.end() && v != stored.end()) {
      ck.optimizer.first_moments()[idx] = m->second;
      ck.optimizer.second_moments()[idx] = v->second;
    }
    ++idx;
  }
  ck.optimizer.set_step_count(step);

  const std::uint32_t records = binio::get_u32(is, "metric count");
  for (std::uint32_t i = 0; i < records; ++i) {
    EpochMetrics m;
    m.epoch = binio::get_u32(is, "metric epoch");
    m.lr = binio::get_f64(is, "metric lr");
    m.train_loss = binio::get_f64(is, "metric loss");
    m.val_accuracy = binio::get_f64(is, "metric accuracy");
    ck.history.push_back(m);
  }
  return ck;
}

}  // namespace nmt
