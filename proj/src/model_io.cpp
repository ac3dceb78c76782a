#include <cstring>
#include <map>
#include <sstream>

#include "nowcast/binary_io.hpp"
#include "nowcast/error.hpp"
#include "nowcast/model.hpp"

namespace nowcast {

namespace {

constexpr std::string_view kModelMagic = "NWM1";
constexpr std::uint32_t kModelVersion = 1;

std::string join(const std::array<std::size_t, 4>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::string config_echo(const NowcastModel& m) {
  const auto& c = m.config();
  const auto& t = m.train_config;
  std::ostringstream os;
  os.precision(17);
  os << "conv_channels=" << join(c.conv_channels) << "\n"
     << "kernels=" << join(c.kernels) << "\n"
     << "fc_hidden=" << c.fc_hidden << "\n"
     << "feature_dim=" << c.feature_dim << "\n"
     << "lstm_hidden=" << c.lstm_hidden << "\n"
     << "epochs=" << t.epochs << "\n"
     << "batch_size=" << t.batch_size << "\n"
     << "optimizer=" << (t.optimizer == OptimizerKind::adam ? "adam" : "sgd") << "\n"
     << "learning_rate=" << t.learning_rate << "\n"
     << "patience=" << t.patience << "\n"
     << "track_chunk=" << t.track_chunk << "\n"
     << "threshold=" << t.threshold << "\n"
     << "seed=" << t.seed << "\n";
  for (std::size_t v = 0; v < kSampleVariables; ++v) os << "normalizer." << v << "=" << m.normalizer.names[v] << "\n";
  return os.str();
}

std::map<std::string, std::string> parse_echo(const std::string& text, std::uint64_t offset) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed config echo line \"" + line + "\"", offset);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::array<std::size_t, 4> parse_quad(const std::string& s, std::uint64_t offset) {
  std::array<std::size_t, 4> out{};
  std::istringstream is(s);
  std::string item;
  std::size_t i = 0;
  while (std::getline(is, item, ',')) {
    if (i >= 4) throw FormatError("expected four entries in \"" + s + "\"", offset);
    out[i++] = std::stoull(item);
  }
  if (i != 4) throw FormatError("expected four entries in \"" + s + "\"", offset);
  return out;
}

struct Section {
  Shape shape;
  std::vector<double> values;
};

void put_section(bin::Writer& w, const std::string& name, const Shape& shape, std::span<const double> values) {
  w.cstring(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.u32(static_cast<std::uint32_t>(d));
  w.f64_array(values);
}

}  // namespace

std::vector<std::uint8_t> encode_model(const NowcastModel& model) {
  bin::Writer w;
  w.tag(kModelMagic);
  w.u32(kModelVersion);
  w.u64(model.provenance);
  w.cstring(config_echo(model));

  const auto params = model.named_parameters();
  const auto& bn = model.bn_states();
  w.u32(static_cast<std::uint32_t>(params.size() + 2 * bn.size() + 2));
  for (const auto& p : params) put_section(w, p.name, p.tensor.shape(), p.tensor.values());
  for (std::size_t i = 0; i < bn.size(); ++i) {
    const std::string n = "bn" + std::to_string(i + 1);
    put_section(w, n + ".running_mean", {bn[i].running_mean.size()}, bn[i].running_mean);
    put_section(w, n + ".running_var", {bn[i].running_var.size()}, bn[i].running_var);
  }
  put_section(w, "normalizer.min", {kSampleVariables}, model.normalizer.min);
  put_section(w, "normalizer.max", {kSampleVariables}, model.normalizer.max);
  w.u32(bin::crc32(w.buffer()));
  return std::move(w.buffer());
}

NowcastModel decode_model(std::span<const std::uint8_t> bytes) {
  bin::Reader r(bytes);
  r.expect_tag(kModelMagic);
  const std::uint64_t version_at = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kModelVersion) {
    throw FormatError("unsupported model format version " + std::to_string(version), version_at);
  }
  if (bytes.size() < 12) throw FormatError("truncated model file", bytes.size());
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (bin::crc32(bytes.first(bytes.size() - 4)) != stored_crc) {
    throw FormatError("model checksum mismatch (file truncated or corrupted)", bytes.size() - 4);
  }
  bin::Reader body(bytes.first(bytes.size() - 4));
  body.expect_tag(kModelMagic);
  body.u32();

  const std::uint64_t provenance = body.u64();
  const std::uint64_t echo_at = body.offset();
  auto kv = parse_echo(body.cstring(1 << 16), echo_at);
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("config echo lacks \"" + key + "\"", echo_at);
    return it->second;
  };

  ModelConfig cfg;
  TrainConfig tc;
  try {
    cfg.conv_channels = parse_quad(get("conv_channels"), echo_at);
    cfg.kernels = parse_quad(get("kernels"), echo_at);
    cfg.fc_hidden = std::stoull(get("fc_hidden"));
    cfg.feature_dim = std::stoull(get("feature_dim"));
    cfg.lstm_hidden = std::stoull(get("lstm_hidden"));
    tc.epochs = std::stoull(get("epochs"));
    tc.batch_size = std::stoull(get("batch_size"));
    tc.optimizer = get("optimizer") == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
    tc.learning_rate = std::stod(get("learning_rate"));
    tc.patience = std::stoull(get("patience"));
    tc.track_chunk = std::stoull(get("track_chunk"));
    tc.threshold = std::stod(get("threshold"));
    tc.seed = std::stoull(get("seed"));
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("bad config echo value: ") + e.what(), echo_at);
  }
  tc.model = cfg;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("config echo: ") + e.what(), echo_at);
  }

  NowcastModel model(cfg, 0);
  model.train_config = tc;
  model.provenance = provenance;
  for (std::size_t v = 0; v < kSampleVariables; ++v) model.normalizer.names[v] = get("normalizer." + std::to_string(v));

  std::map<std::string, Section> sections;
  const std::uint32_t count = body.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint64_t at = body.offset();
    std::string name = body.cstring(256);
    const std::uint32_t ndim = body.u32();
    if (ndim == 0 || ndim > 8) throw FormatError("section " + name + " has rank " + std::to_string(ndim), at);
    Section s;
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      s.shape.push_back(body.u32());
      n *= s.shape.back();
      if (n > (std::uint64_t{1} << 40)) throw FormatError("section " + name + " is implausibly large", at);
    }
    body.require(n * sizeof(double), "section payload");
    s.values.resize(n);
    body.f64_array(s.values);
    sections.emplace(std::move(name), std::move(s));
  }
  if (!body.at_end()) throw FormatError("unexpected bytes before checksum", body.offset());

  auto take = [&](const std::string& name, const Shape& shape) -> std::vector<double>& {
    auto it = sections.find(name);
    if (it == sections.end()) throw FormatError("model file lacks section " + name, echo_at);
    if (it->second.shape != shape) {
      throw FormatError("section " + name + " has shape " + shape_str(it->second.shape) + ", expected " + shape_str(shape),
                        echo_at);
    }
    return it->second.values;
  };
  for (auto& p : model.named_parameters()) {
    const auto& v = take(p.name, p.tensor.shape());
    std::copy(v.begin(), v.end(), p.tensor.mutable_values().begin());
  }
  auto& bn = model.bn_states();
  for (std::size_t i = 0; i < bn.size(); ++i) {
    const std::string n = "bn" + std::to_string(i + 1);
    bn[i].running_mean = take(n + ".running_mean", {bn[i].running_mean.size()});
    bn[i].running_var = take(n + ".running_var", {bn[i].running_var.size()});
  }
  const auto& mn = take("normalizer.min", {kSampleVariables});
  const auto& mx = take("normalizer.max", {kSampleVariables});
  std::copy(mn.begin(), mn.end(), model.normalizer.min.begin());
  std::copy(mx.begin(), mx.end(), model.normalizer.max.begin());
  return model;
}

void save_model(const NowcastModel& model, const std::string& path) { bin::write_file(path, encode_model(model)); }

NowcastModel load_model(const std::string& path) { return decode_model(bin::read_file(path)); }

}  // namespace nowcast
