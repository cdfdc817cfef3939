#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rwkv_clip/data.hpp"
#include "rwkv_clip/model.hpp"

namespace rwkv_clip {

struct TrainConfig {
  double lr_max = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.2;
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  double pct_start = 0.1;
  std::uint64_t seed = 7;
  double div_factor = 25.0;
  double final_div = 1e4;
  double grad_clip = 1.0;
  /// Random translation (pixels, edge replicated) and horizontal flip of
  /// training images; 0 disables translation.
  std::size_t augment_shift = 2;
  bool augment_flip = true;
  /// Single-threaded execution with no background data loading.
  bool deterministic = false;

  void validate() const;
};

/// Strict: unknown keys throw. "betas" is a two-element array.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& config);

// ---- optimizer -----------------------------------------------------------------

struct ParamRef {
  std::string name;
  Tensor tensor;
  bool decay = true;  // false for norm gains/biases and the temperature
};

std::vector<ParamRef> collect_params(ClipModel& model);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One AdamW update at step t >= 1 using each tensor's accumulated grad
/// (missing grads count as zero):
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
/// with the decay term only for params marked `decay`.
void adamw_step(std::vector<ParamRef>& params, AdamState& state, std::size_t t, double lr, const TrainConfig& config);

/// Linear warmup from lr_max/div_factor to lr_max over round(pct_start * total)
/// steps, then cosine anneal to lr_max/(div_factor*final_div).
double onecycle_lr(std::size_t step, std::size_t total_steps, const TrainConfig& config);

/// Scales all grads so their global L2 norm is at most max_norm. Returns the
/// norm before clipping.
double clip_grad_norm(std::vector<ParamRef>& params, double max_norm);

// ---- checkpoints ------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'R', 'W', 'K', 'V', 'C', 'L', 'I', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  enum class Kind { kIo, kBadMagic, kVersion, kTruncated, kCorrupt };
  CheckpointError(Kind kind, const std::string& message) : Error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  nlohmann::json config;
  std::map<std::string, Tensor> tensors;  // sorted by name
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// {"model": ..., "train": ...} config plus every parameter.
Checkpoint make_checkpoint(ClipModel& model, const TrainConfig& train);
/// Rebuilds the model from a checkpoint; every parameter must be present with
/// its expected shape.
ClipModel model_from_checkpoint(const Checkpoint& checkpoint);

// ---- training loop -----------------------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct TrainOptions {
  /// Receives metrics.csv and checkpoint.bin; empty disables file output.
  std::filesystem::path out_dir;
  std::filesystem::path image_base_dir;
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(std::size_t epoch, double mean_loss)> on_epoch;
};

struct TrainResult {
  ClipModel model;
  std::vector<StepMetrics> history;
};

/// Full optimization run. Each step samples one text variant per record,
/// tokenizes, renders images, runs both towers, takes the mean-form loss,
/// clips gradients and applies AdamW on the OneCycle schedule.
/// Throws NumericError naming the offending batch when the loss goes non-finite.
TrainResult train(const std::vector<PairedRecord>& dataset, const ModelConfig& model_config,
                  const TrainConfig& train_config, const TrainOptions& options = {});

/// Training-time image augmentation of one [H, W, 3] image: translate by up
/// to `shift` pixels per axis with edge replication, then maybe flip
/// horizontally. Deterministic in `seed`.
Tensor augment_image(const Tensor& image, std::size_t shift, bool flip, std::uint64_t seed);

/// Seed for the text variant of `record` at `epoch`.
std::uint64_t text_sample_seed(std::uint64_t seed, std::size_t epoch, std::size_t record);

void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const StepMetrics& m);

}  // namespace rwkv_clip
