#include "rwkv_clip/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <future>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>

namespace rwkv_clip {

// ---- config ----------------------------------------------------------------------

void TrainConfig::validate() const {
  RWKV_CHECK(lr_max >= 0.0, "train config: lr_max must be non-negative");
  RWKV_CHECK(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "train config: betas must be in [0, 1)");
  RWKV_CHECK(eps > 0.0, "train config: eps must be positive");
  RWKV_CHECK(weight_decay >= 0.0, "train config: weight_decay must be non-negative");
  RWKV_CHECK(batch_size >= 2, "train config: batch_size must be at least 2");
  RWKV_CHECK(epochs >= 1, "train config: epochs must be at least 1");
  RWKV_CHECK(pct_start > 0.0 && pct_start < 1.0, "train config: pct_start must be in (0, 1)");
  RWKV_CHECK(div_factor > 0.0 && final_div > 0.0, "train config: div factors must be positive");
  RWKV_CHECK(grad_clip > 0.0, "train config: grad_clip must be positive");
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  RWKV_CHECK(j.is_object(), "train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "lr_max") c.lr_max = value.get<double>();
      else if (key == "betas") {
        RWKV_CHECK(value.is_array() && value.size() == 2, "train config: betas must be a two-element array");
        c.beta1 = value[0].get<double>();
        c.beta2 = value[1].get<double>();
      } else if (key == "eps") c.eps = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "pct_start") c.pct_start = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "div_factor") c.div_factor = value.get<double>();
      else if (key == "final_div") c.final_div = value.get<double>();
      else if (key == "grad_clip") c.grad_clip = value.get<double>();
      else if (key == "augment_shift") c.augment_shift = value.get<std::size_t>();
      else if (key == "augment_flip") c.augment_flip = value.get<bool>();
      else if (key == "deterministic") c.deterministic = value.get<bool>();
      else throw Error("train config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"lr_max", c.lr_max},         {"betas", {c.beta1, c.beta2}}, {"eps", c.eps},
          {"weight_decay", c.weight_decay}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
          {"pct_start", c.pct_start},   {"seed", c.seed},               {"div_factor", c.div_factor},
          {"final_div", c.final_div},   {"grad_clip", c.grad_clip},     {"augment_shift", c.augment_shift},
          {"augment_flip", c.augment_flip}, {"deterministic", c.deterministic}};
}

// ---- optimizer ---------------------------------------------------------------------

std::vector<ParamRef> collect_params(ClipModel& model) {
  std::vector<ParamRef> params;
  model.for_each_param([&](const std::string& name, Tensor& t, ParamKind kind) {
    params.push_back({name, t, kind == ParamKind::kWeight});
  });
  return params;
}

void adamw_step(std::vector<ParamRef>& params, AdamState& state, std::size_t t, double lr, const TrainConfig& cfg) {
  RWKV_CHECK(t >= 1, "adamw_step: step count starts at 1");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  RWKV_CHECK(state.m.size() == params.size(), "adamw_step: optimizer state does not match the parameter list");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto data = p.tensor.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    RWKV_CHECK(m.size() == data.size(), "adamw_step: shape mismatch for " + p.name);
    std::span<const double> g;
    if (p.tensor.has_grad()) {
      g = p.tensor.grad();
      RWKV_CHECK(g.size() == data.size(), "adamw_step: grad shape mismatch for " + p.name);
    }
    const double wd = p.decay ? cfg.weight_decay : 0.0;
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      data[k] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + wd * data[k]);
    }
  }
}

double onecycle_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  RWKV_CHECK(step < total_steps, "onecycle_lr: step " + std::to_string(step) + " out of range for " +
                                     std::to_string(total_steps) + " steps");
  const double lr_start = cfg.lr_max / cfg.div_factor;
  const double lr_end = cfg.lr_max / (cfg.div_factor * cfg.final_div);
  const auto s1 = static_cast<std::size_t>(std::llround(cfg.pct_start * static_cast<double>(total_steps)));
  if (step < s1) return lr_start + (cfg.lr_max - lr_start) * static_cast<double>(step) / static_cast<double>(s1);
  if (step == s1 || total_steps - 1 <= s1) return cfg.lr_max;
  const double progress = static_cast<double>(step - s1) / static_cast<double>(total_steps - 1 - s1);
  return lr_end + (cfg.lr_max - lr_end) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

double clip_grad_norm(std::vector<ParamRef>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (double& g : p.tensor.mutable_grad()) g *= scale;
  }
  return norm;
}

// ---- checkpoints -----------------------------------------------------------------------

namespace {

constexpr std::uint8_t kDtypeF64 = 0;

template <typename T>
void put_le(std::string& out, T value) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &value, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
  T get(const std::string& what) {
    need(sizeof(T), what);
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, &bits, sizeof(T));
    return value;
  }

  std::string take(std::size_t n, const std::string& what) {
    need(n, what);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n) throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint truncated in " + what);
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string config = ck.config.dump();
  put_le<std::uint64_t>(out, config.size());
  out += config;
  put_le<std::uint64_t>(out, ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(kDtypeF64));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
    for (double v : t.data()) put_le<double>(out, v);
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << f.rdbuf();
  Reader r(buf.str());

  const std::string magic = r.take(sizeof(kCheckpointMagic), "header");
  if (magic != std::string(kCheckpointMagic, sizeof(kCheckpointMagic)))
    throw CheckpointError(CheckpointError::Kind::kBadMagic, path.string() + ": bad magic, not a checkpoint");
  const auto version = r.get<std::uint32_t>("header");
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointError::Kind::kVersion,
                          fmt::format("{}: unsupported checkpoint version {} (expected {})", path.string(), version,
                                      kCheckpointVersion));
  Checkpoint ck;
  const auto config_len = r.get<std::uint64_t>("config length");
  try {
    ck.config = nlohmann::json::parse(r.take(config_len, "config"));
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(CheckpointError::Kind::kCorrupt, std::string("checkpoint config: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>("tensor count");
  std::string previous;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>(fmt::format("tensor #{} name", i));
    const std::string name = r.take(name_len, fmt::format("tensor #{} name", i));
    const std::string where = "tensor '" + name + "'";
    if (i > 0 && name <= previous)
      throw CheckpointError(CheckpointError::Kind::kCorrupt, "checkpoint tensor names not sorted at " + where);
    previous = name;
    const auto dtype = r.get<std::uint8_t>(where);
    if (dtype != kDtypeF64)
      throw CheckpointError(CheckpointError::Kind::kCorrupt, fmt::format("{}: unknown dtype code {}", where, dtype));
    const auto ndim = r.get<std::uint32_t>(where);
    Shape shape(ndim);
    for (auto& d : shape) d = r.get<std::uint64_t>(where);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = r.get<double>(where);
    ck.tensors.emplace(name, Tensor::from(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw CheckpointError(CheckpointError::Kind::kCorrupt, "trailing bytes after checkpoint tensor table");
  return ck;
}

Checkpoint make_checkpoint(ClipModel& model, const TrainConfig& train) {
  Checkpoint ck;
  ck.config = {{"model", model_config_to_json(model.config)}, {"train", train_config_to_json(train)}};
  model.for_each_param([&](const std::string& name, Tensor& t, ParamKind) { ck.tensors.emplace(name, t.clone()); });
  return ck;
}

ClipModel model_from_checkpoint(const Checkpoint& ck) {
  RWKV_CHECK(ck.config.contains("model"), "checkpoint config has no model section");
  const ModelConfig config = model_config_from_json(ck.config.at("model"));
  ClipModel model = ClipModel::init(config, 0);
  std::size_t used = 0;
  model.for_each_param([&](const std::string& name, Tensor& t, ParamKind) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw Error("checkpoint is missing parameter '" + name + "'");
    if (it->second.shape() != t.shape())
      throw Error("checkpoint parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                  shape_str(t.shape()));
    auto dst = t.mutable_data();
    std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
    ++used;
  });
  if (used != ck.tensors.size()) throw Error("checkpoint has parameters the model does not define");
  return model;
}

// ---- training -------------------------------------------------------------------------------

std::uint64_t text_sample_seed(std::uint64_t seed, std::size_t epoch, std::size_t record) {
  // splitmix64 finalizer over a combined key
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + epoch * 0xBF58476D1CE4E5B9ULL + record * 0x94D049BB133111EBULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor augment_image(const Tensor& image, std::size_t shift, bool flip, std::uint64_t seed) {
  RWKV_CHECK(image.ndim() == 3 && image.dim(2) == 3, "augment_image: image must be [H,W,3]");
  const auto h = static_cast<long>(image.dim(0)), w = static_cast<long>(image.dim(1));
  std::mt19937_64 rng(seed);
  const auto s = static_cast<long>(shift);
  std::uniform_int_distribution<long> offset(-s, s);
  const long dy = offset(rng), dx = offset(rng);
  const bool mirror = flip && (rng() & 1U);
  auto src = image.data();
  std::vector<double> out(src.size());
  for (long y = 0; y < h; ++y) {
    const long sy = std::clamp(y - dy, 0L, h - 1);
    for (long x = 0; x < w; ++x) {
      long sx = std::clamp(x - dx, 0L, w - 1);
      if (mirror) sx = w - 1 - sx;
      std::copy_n(src.begin() + (sy * w + sx) * 3, 3, out.begin() + (y * w + x) * 3);
    }
  }
  return Tensor::from(image.shape(), std::move(out));
}

void write_metrics_header(std::ostream& os) { os << "step,epoch,loss,lr,grad_norm\n"; }

void write_metrics_row(std::ostream& os, const StepMetrics& m) {
  os << fmt::format("{},{},{},{},{}\n", m.step, m.epoch, m.loss, m.lr, m.grad_norm);
}

namespace {

struct PreparedBatch {
  std::vector<std::size_t> indices;
  Tensor images;
  TextBatch text;
};

PreparedBatch prepare_batch(const std::vector<PairedRecord>& dataset, std::vector<std::size_t> indices,
                            std::size_t epoch, const ModelConfig& mc, const TrainConfig& tc,
                            const std::filesystem::path& base_dir) {
  std::vector<Tensor> images;
  std::vector<std::string> texts;
  for (auto i : indices) {
    const std::uint64_t seed = text_sample_seed(tc.seed, epoch, i);
    Tensor image = load_image(dataset[i].image_source, base_dir);
    if (tc.augment_shift > 0 || tc.augment_flip) image = augment_image(image, tc.augment_shift, tc.augment_flip, ~seed);
    images.push_back(std::move(image));
    texts.push_back(sample_text(dataset[i], seed));
  }
  PreparedBatch b{std::move(indices), stack_images(images), tokenize_batch(texts, mc.text.context_len)};
  if (b.images.dim(1) != mc.image.image_size || b.images.dim(2) != mc.image.image_size)
    throw Error("training image size " + shape_str(b.images.shape()) + " does not match image_size " +
                std::to_string(mc.image.image_size));
  return b;
}

std::string ids_of(const std::vector<PairedRecord>& dataset, const std::vector<std::size_t>& indices) {
  std::string out;
  for (auto i : indices) out += (out.empty() ? "" : ",") + dataset[i].id;
  return out;
}

}  // namespace

TrainResult train(const std::vector<PairedRecord>& dataset, const ModelConfig& model_config,
                  const TrainConfig& tc, const TrainOptions& options) {
  tc.validate();
  model_config.validate();
  RWKV_CHECK(dataset.size() >= 2, "train: need at least 2 records");
  for (const auto& r : dataset) r.validate();

  TrainResult result{ClipModel::init(model_config, tc.seed), {}};
  ClipModel& model = result.model;
  auto params = collect_params(model);
  AdamState adam;

  const std::size_t batch = std::min(tc.batch_size, dataset.size());
  const std::size_t steps_per_epoch = dataset.size() / batch;  // the ragged tail is dropped
  const std::size_t total_steps = steps_per_epoch * tc.epochs;

  std::ofstream metrics;
  std::filesystem::path checkpoint_path;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    metrics.open(options.out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw Error("cannot write " + (options.out_dir / "metrics.csv").string());
    write_metrics_header(metrics);
    checkpoint_path = options.out_dir / "checkpoint.bin";
  }

  std::mt19937_64 shuffle_rng(tc.seed);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    auto slice = [&](std::size_t b) {
      return std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(b * batch),
                                      order.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch));
    };
    auto load = [&, epoch](std::vector<std::size_t> idx) {
      return prepare_batch(dataset, std::move(idx), epoch, model_config, tc, options.image_base_dir);
    };

    // Outside deterministic mode the next batch is rendered while this one trains.
    std::future<PreparedBatch> pending;
    if (!tc.deterministic) pending = std::async(std::launch::async, load, slice(0));
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      PreparedBatch pb = tc.deterministic ? load(slice(b)) : pending.get();
      if (!tc.deterministic && b + 1 < steps_per_epoch) pending = std::async(std::launch::async, load, slice(b + 1));

      for (auto& p : params) p.tensor.zero_grad();
      StepMetrics m{step, epoch, 0.0, onecycle_lr(step, total_steps, tc), 0.0};
      try {
        Tape tape;
        TapeScope scope(tape);
        Tensor img = model.encode_images(pb.images);
        Tensor txt = encoder_forward(pb.text, model.text);
        Tensor loss = clip_loss_mean({img, txt}, model.temperature);
        m.loss = loss.item();
        if (!std::isfinite(m.loss)) throw NumericError("loss is " + std::to_string(m.loss));
        tape.backward(loss);
      } catch (const NumericError& e) {
        const std::string ids = ids_of(dataset, pb.indices);
        if (!options.out_dir.empty()) {
          std::ofstream dump(options.out_dir / "nonfinite_batch.json");
          dump << nlohmann::json{{"step", step}, {"epoch", epoch}, {"batch", b}, {"ids", ids}, {"error", e.what()}}
                      .dump(2)
               << '\n';
        }
        throw NumericError(fmt::format("non-finite loss at step {} (epoch {}, batch {}): {}; record ids: {}", step,
                                       epoch, b, e.what(), ids));
      }
      m.grad_norm = clip_grad_norm(params, tc.grad_clip);
      adamw_step(params, adam, step + 1, m.lr, tc);

      epoch_loss += m.loss;
      result.history.push_back(m);
      if (metrics.is_open()) {
        write_metrics_row(metrics, m);
        metrics.flush();
      }
      if (options.on_step) options.on_step(m);
    }
    if (options.on_epoch) options.on_epoch(epoch, epoch_loss / static_cast<double>(steps_per_epoch));
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, make_checkpoint(model, tc));
  }
  for (auto& p : params) p.tensor.zero_grad();
  return result;
}

}  // namespace rwkv_clip
