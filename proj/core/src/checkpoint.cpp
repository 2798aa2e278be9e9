#include "paed/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "paed/error.hpp"

namespace paed {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'P', 'A', 'E', 'D'};
constexpr std::uint32_t kVersion = 1;

static_assert(sizeof(double) == 8, "checkpoint format assumes 8-byte doubles");

void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t parse_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

json model_config_json(const ModelConfig& m) {
  return json{{"n_mels", m.n_mels},
              {"context_frames", m.context_frames},
              {"n_classes", m.n_classes},
              {"conv_filters", m.conv_filters},
              {"hidden_size", m.hidden_size},
              {"pool_sizes", m.pool_sizes},
              {"dropout", m.dropout}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  m.n_mels = j.at("n_mels").get<int>();
  m.context_frames = j.at("context_frames").get<int>();
  m.n_classes = j.at("n_classes").get<int>();
  m.conv_filters = j.at("conv_filters").get<int>();
  m.hidden_size = j.at("hidden_size").get<int>();
  auto pools = j.at("pool_sizes").get<std::vector<int>>();
  if (pools.size() != 3) throw CorruptFile("checkpoint: pool_sizes must have 3 entries");
  std::copy(pools.begin(), pools.end(), m.pool_sizes.begin());
  m.dropout = j.at("dropout").get<double>();
  return m;
}

json features_config_json(const SpectrogramConfig& f) {
  return json{{"n_mels", f.n_mels},     {"fmin_hz", f.fmin_hz},     {"fmax_hz", f.fmax_hz},
              {"win_ms", f.win_ms},     {"hop_ms", f.hop_ms},       {"fft_size", f.fft_size},
              {"log_floor", f.log_floor}};
}

SpectrogramConfig features_config_from_json(const json& j) {
  SpectrogramConfig f;
  f.n_mels = j.at("n_mels").get<int>();
  f.fmin_hz = j.at("fmin_hz").get<double>();
  f.fmax_hz = j.at("fmax_hz").get<double>();
  f.win_ms = j.at("win_ms").get<double>();
  f.hop_ms = j.at("hop_ms").get<double>();
  f.fft_size = j.at("fft_size").get<int>();
  f.log_floor = j.at("log_floor").get<double>();
  return f;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  // const_cast is confined to enumeration; nothing below mutates the params.
  ModelParams& params = const_cast<ModelParams&>(ckpt.params);
  auto entries = params.entries();

  json manifest = json::array();
  std::int64_t offset = 0;  // in doubles
  for (const auto& e : entries) {
    const Tensor& t = e.param != nullptr ? e.param->value : *e.state;
    manifest.push_back(json{{"name", e.name},
                            {"shape", t.shape()},
                            {"offset", offset},
                            {"trainable", e.trainable}});
    offset += t.size();
  }

  json bn_init = json::object();
  for (const auto& e : entries) {
    if (e.bn != nullptr) bn_init[e.name.substr(0, e.name.rfind('.'))] = e.bn->initialized;
  }

  json header{{"format", "paed-checkpoint"},
              {"model", model_config_json(ckpt.model)},
              {"features", features_config_json(ckpt.features)},
              {"labels", ckpt.labels},
              {"standardizer", json{{"mean", ckpt.standardizer.mean}, {"std", ckpt.standardizer.stddev}}},
              {"thresholds", json{{"alpha", ckpt.thresholds.alpha},
                                  {"beta", ckpt.thresholds.beta},
                                  {"baseline_alpha", ckpt.thresholds.baseline_alpha},
                                  {"median_window", ckpt.thresholds.median_window}}},
              {"bn_initialized", bn_init},
              {"params", manifest}};
  const std::string header_text = header.dump();

  std::string out;
  out.append(kMagic, 4);
  append_u32(out, kVersion);
  append_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  for (const auto& e : entries) {
    const Tensor& t = e.param != nullptr ? e.param->value : *e.state;
    out.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * 8);
  }
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
  append_u32(out, crc);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInput("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16) throw CorruptFile("checkpoint too small: " + path);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (std::memcmp(p, kMagic, 4) != 0) throw CorruptFile("bad checkpoint magic: " + path);
  const std::uint32_t version = parse_u32(p + 4);
  if (version != kVersion) {
    throw VersionMismatch("unsupported checkpoint version " + std::to_string(version));
  }

  const std::uint32_t stored_crc = parse_u32(p + bytes.size() - 4);
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size() - 4)));
  if (crc != stored_crc) throw CorruptFile("checkpoint CRC mismatch: " + path);

  const std::uint32_t header_len = parse_u32(p + 8);
  if (12 + static_cast<std::size_t>(header_len) + 4 > bytes.size()) {
    throw CorruptFile("checkpoint header overruns file: " + path);
  }
  json header;
  try {
    header = json::parse(bytes.substr(12, header_len));
  } catch (const json::exception& e) {
    throw CorruptFile(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.model = model_config_from_json(header.at("model"));
    ckpt.features = features_config_from_json(header.at("features"));
    ckpt.labels = header.at("labels").get<std::vector<std::string>>();
    ckpt.standardizer.mean = header.at("standardizer").at("mean").get<std::vector<double>>();
    ckpt.standardizer.stddev = header.at("standardizer").at("std").get<std::vector<double>>();
    const json& th = header.at("thresholds");
    ckpt.thresholds.alpha = th.at("alpha").get<std::vector<double>>();
    ckpt.thresholds.beta = th.at("beta").get<std::vector<double>>();
    ckpt.thresholds.baseline_alpha = th.at("baseline_alpha").get<std::vector<double>>();
    ckpt.thresholds.median_window = th.at("median_window").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw CorruptFile(std::string("checkpoint header incomplete: ") + e.what());
  }

  ckpt.params = init_params(ckpt.model, 0);  // shapes only; overwritten below
  auto entries = ckpt.params.entries();
  const json& bn_init = header.at("bn_initialized");
  const char* blocks = bytes.data() + 12 + header_len;
  const std::size_t blocks_len = bytes.size() - 12 - header_len - 4;

  std::size_t manifest_idx = 0;
  for (const json& item : header.at("params")) {
    if (manifest_idx >= entries.size()) throw CorruptFile("checkpoint has extra parameters");
    auto& e = entries[manifest_idx++];
    if (item.at("name").get<std::string>() != e.name) {
      throw CorruptFile("checkpoint parameter order mismatch at " + e.name);
    }
    Tensor& t = e.param != nullptr ? e.param->value : *e.state;
    const auto shape = item.at("shape").get<std::vector<int>>();
    if (shape != t.shape()) throw CorruptFile("checkpoint shape mismatch for " + e.name);
    const std::int64_t off = item.at("offset").get<std::int64_t>();
    if ((off + t.size()) * 8 > static_cast<std::int64_t>(blocks_len)) {
      throw CorruptFile("checkpoint parameter block overruns file");
    }
    std::memcpy(t.data(), blocks + off * 8, static_cast<std::size_t>(t.size()) * 8);
    if (e.bn != nullptr) {
      const std::string key = e.name.substr(0, e.name.rfind('.'));
      e.bn->initialized = bn_init.at(key).get<bool>();
    }
  }
  if (manifest_idx != entries.size()) throw CorruptFile("checkpoint is missing parameters");
  return ckpt;
}

void ensure_compatible(const Checkpoint& ckpt, const ModelConfig& expected) {
  const ModelConfig& m = ckpt.model;
  if (m.n_classes != expected.n_classes || m.n_mels != expected.n_mels ||
      m.conv_filters != expected.conv_filters || m.hidden_size != expected.hidden_size ||
      m.context_frames != expected.context_frames || m.pool_sizes != expected.pool_sizes) {
    throw VersionMismatch("checkpoint was trained for a different model configuration");
  }
}

}  // namespace paed
