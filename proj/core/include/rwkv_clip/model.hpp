#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rwkv_clip/contrastive.hpp"
#include "rwkv_clip/data.hpp"
#include "rwkv_clip/encoder.hpp"

namespace rwkv_clip {

struct ModelConfig {
  EncoderConfig image = EncoderConfig::desk_image();
  EncoderConfig text = EncoderConfig::desk_text();

  /// Both towers must agree on the shared embedding width.
  void validate() const;
};

/// {"image": {...}, "text": {...}}; unknown keys throw.
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& config);

/// Dual encoder: image tower, text tower and the learned temperature.
struct ClipModel {
  ModelConfig config;
  TowerParams image;
  TowerParams text;
  TemperatureParam temperature;

  static ClipModel init(const ModelConfig& config, std::uint64_t seed);

  /// Names are prefixed "image.", "text." and the temperature is "log_inv_tau".
  void for_each_param(const ParamVisitor& visit);

  /// [B, H, W, 3] pixels in [0, 1] -> [B, D_e], centering pixels first.
  Tensor encode_images(const Tensor& images) const;
  Tensor encode_texts(const std::vector<std::string>& texts) const;
};

/// Maps pixels from [0, 1] to [-1, 1]. No history.
Tensor normalize_pixels(const Tensor& images);

/// Images of the records, rendered or loaded, stacked [B, H, W, 3].
Tensor load_batch_images(const std::vector<PairedRecord>& records, const std::filesystem::path& base_dir);

/// Inference-mode embeddings of every record, computed in chunks of `batch`.
/// Texts are the raw captions.
BatchEmbeddings embed_records(const ClipModel& model, const std::vector<PairedRecord>& records,
                              const std::filesystem::path& base_dir, std::size_t batch = 64);

struct RetrievalReport {
  std::size_t queries = 0;
  // recall at k = 1, 5, 10
  std::array<double, 3> image_to_text{};
  std::array<double, 3> text_to_image{};

  nlohmann::json to_json() const;
};

RetrievalReport retrieval_report(const BatchEmbeddings& embeddings);

}  // namespace rwkv_clip
