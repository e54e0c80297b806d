#include "msae/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "msae/error.hpp"

namespace msae {

static_assert(std::endian::native == std::endian::little,
              "payload is written as host-order doubles; big-endian hosts need byte swapping");

const Matrix& Container::tensor(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw IoError("container has no tensor named '" + std::string(name) + "'");
}

namespace {

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) throw IoError("truncated header length");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_container(std::ostream& out, std::string_view magic, const Container& c) {
  nlohmann::json header = c.header;
  header["dtype"] = "f64";
  header["byte_order"] = "little";
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : c.tensors) {
    header["tensors"].push_back({{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}}});
  }
  const std::string text = header.dump();
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : c.tensors) {
    const auto vals = t.value.values();
    out.write(reinterpret_cast<const char*>(vals.data()),
              static_cast<std::streamsize>(vals.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing container payload");
}

Container read_container(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!in || got != magic) {
    throw IoError("bad magic: expected '" + std::string(magic) + "'");
  }
  const std::uint64_t len = read_u64(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated JSON header");

  Container c;
  try {
    c.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed JSON header: ") + e.what());
  }
  if (c.header.value("dtype", "") != "f64") throw IoError("unsupported dtype (expected f64)");
  for (const auto& desc : c.header.at("tensors")) {
    const auto rows = desc.at("shape").at(0).get<std::size_t>();
    const auto cols = desc.at("shape").at(1).get<std::size_t>();
    std::vector<double> data(rows * cols);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw IoError("truncated payload for tensor '" + desc.at("name").get<std::string>() + "'");
    c.tensors.push_back({desc.at("name").get<std::string>(), Matrix(rows, cols, std::move(data))});
  }
  c.header.erase("tensors");
  c.header.erase("dtype");
  c.header.erase("byte_order");
  return c;
}

void write_container_file(const std::filesystem::path& path, std::string_view magic,
                          const Container& c) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_container(out, magic, c);
  out.flush();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Container read_container_file(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  try {
    return read_container(in, magic);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_tensor(const std::filesystem::path& path, const Matrix& m, const nlohmann::json& extra) {
  Container c;
  c.header = extra;
  c.header["shape"] = {m.rows(), m.cols()};
  c.header["order"] = "row-major";
  c.tensors.push_back({"data", m});
  write_container_file(path, kTensorMagic, c);
}

Matrix load_tensor(const std::filesystem::path& path) {
  Container c = read_container_file(path, kTensorMagic);
  if (c.tensors.size() != 1) throw IoError(path.string() + ": expected exactly one tensor");
  return std::move(c.tensors.front().value);
}

nlohmann::json to_json(const ActivationCfg& cfg) {
  nlohmann::json j = {{"kind", to_string(cfg.kind)}, {"k", cfg.k}};
  j["threshold"] = cfg.threshold ? nlohmann::json(*cfg.threshold) : nlohmann::json(nullptr);
  return j;
}

ActivationCfg activation_from_json(const nlohmann::json& j) {
  ActivationCfg cfg;
  cfg.kind = activation_kind_from_string(j.at("kind").get<std::string>());
  cfg.k = j.value("k", std::size_t{1});
  if (j.contains("threshold") && !j.at("threshold").is_null()) {
    cfg.threshold = j.at("threshold").get<double>();
  }
  cfg.validate();
  return cfg;
}

Container to_container(const ModelCheckpoint& ckpt) {
  ckpt.params.validate();
  Container c;
  c.header = ckpt.meta;
  c.header["format"] = "msae-checkpoint";
  c.header["version"] = 1;
  c.header["dict_size"] = ckpt.params.dict_size();
  c.header["input_dim"] = ckpt.params.input_dim();
  c.header["pre_encoder_bias"] = ckpt.params.pre_encoder_bias;
  c.header["activation"] = to_json(ckpt.activation);
  c.header["step"] = ckpt.step;
  c.tensors = {{"W_enc", ckpt.params.w_enc},
               {"b_enc", ckpt.params.b_enc},
               {"W_dec", ckpt.params.w_dec},
               {"b_dec", ckpt.params.b_dec}};
  for (const auto& t : ckpt.extra_tensors) c.tensors.push_back(t);
  return c;
}

ModelCheckpoint checkpoint_from_container(const Container& c) {
  try {
    ModelCheckpoint ckpt;
    if (c.header.value("format", "") != "msae-checkpoint") throw IoError("not an msae checkpoint");
    if (c.tensors.size() < 4) throw IoError("checkpoint is missing parameter blocks");
    ckpt.params.w_enc = c.tensor("W_enc");
    ckpt.params.b_enc = c.tensor("b_enc");
    ckpt.params.w_dec = c.tensor("W_dec");
    ckpt.params.b_dec = c.tensor("b_dec");
    ckpt.params.pre_encoder_bias = c.header.value("pre_encoder_bias", true);
    ckpt.params.validate();
    if (ckpt.params.dict_size() != c.header.at("dict_size").get<std::size_t>() ||
        ckpt.params.input_dim() != c.header.at("input_dim").get<std::size_t>()) {
      throw IoError("checkpoint header shapes disagree with payload");
    }
    ckpt.activation = activation_from_json(c.header.at("activation"));
    ckpt.step = c.header.value("step", std::uint64_t{0});
    ckpt.meta = c.header;
    for (const char* key : {"format", "version", "dict_size", "input_dim", "pre_encoder_bias",
                            "activation", "step"}) {
      ckpt.meta.erase(key);
    }
    for (std::size_t i = 4; i < c.tensors.size(); ++i) ckpt.extra_tensors.push_back(c.tensors[i]);
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt) {
  write_container_file(path, kCheckpointMagic, to_container(ckpt));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return checkpoint_from_container(read_container_file(path, kCheckpointMagic));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace msae
