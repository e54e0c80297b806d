#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "msae/matrix.hpp"
#include "msae/sae.hpp"

namespace msae {

// Binary layout shared by tensor dumps and checkpoints:
//
//   bytes 0..7    magic ("MSAETENS" or "MSAECKPT")
//   bytes 8..15   header length H, unsigned 64-bit little-endian
//   next H bytes  UTF-8 JSON header; "tensors" lists {name, shape} in payload order
//   remainder     row-major little-endian IEEE-754 binary64 values of each tensor
inline constexpr std::string_view kTensorMagic = "MSAETENS";
inline constexpr std::string_view kCheckpointMagic = "MSAECKPT";

struct NamedTensor {
  std::string name;
  Matrix value;
};

struct Container {
  nlohmann::json header = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Matrix& tensor(std::string_view name) const;
};

void write_container(std::ostream& out, std::string_view magic, const Container& c);
Container read_container(std::istream& in, std::string_view magic);
void write_container_file(const std::filesystem::path& path, std::string_view magic,
                          const Container& c);
Container read_container_file(const std::filesystem::path& path, std::string_view magic);

// Single-tensor dump ("MSAETENS"), e.g. generated activations.
void save_tensor(const std::filesystem::path& path, const Matrix& m,
                 const nlohmann::json& extra = nlohmann::json::object());
Matrix load_tensor(const std::filesystem::path& path);

nlohmann::json to_json(const ActivationCfg& cfg);
ActivationCfg activation_from_json(const nlohmann::json& j);

// Model checkpoint: shapes, activation config, optional metadata, then
// W_enc, b_enc, W_dec, b_dec. Trainer state rides along as extra header
// fields and extra tensors after the four parameter blocks.
struct ModelCheckpoint {
  SaeParams params;
  ActivationCfg activation;
  std::uint64_t step = 0;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> extra_tensors;
};

Container to_container(const ModelCheckpoint& ckpt);
ModelCheckpoint checkpoint_from_container(const Container& c);
void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace msae
