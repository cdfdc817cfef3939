#include "rwkv_clip/model.hpp"

#include <algorithm>
#include <random>

namespace rwkv_clip {

void ModelConfig::validate() const {
  RWKV_CHECK(image.modality == Modality::kImage, "model config: image tower must have image modality");
  RWKV_CHECK(text.modality == Modality::kText, "model config: text tower must have text modality");
  image.validate();
  text.validate();
  RWKV_CHECK(image.shared_dim == text.shared_dim, "model config: image and text shared_dim differ");
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  RWKV_CHECK(j.is_object(), "model config must be a JSON object");
  ModelConfig config;
  for (const auto& [key, value] : j.items()) {
    if (key == "image") config.image = encoder_config_from_json(value, Modality::kImage);
    else if (key == "text") config.text = encoder_config_from_json(value, Modality::kText);
    else throw Error("model config: unknown key '" + key + "'");
  }
  config.validate();
  return config;
}

nlohmann::json model_config_to_json(const ModelConfig& config) {
  return {{"image", encoder_config_to_json(config.image)}, {"text", encoder_config_to_json(config.text)}};
}

ClipModel ClipModel::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 image_rng(seed * 2 + 1);
  std::mt19937_64 text_rng(seed * 2 + 2);
  ClipModel model;
  model.config = config;
  model.image = TowerParams::init(config.image, image_rng);
  model.text = TowerParams::init(config.text, text_rng);
  model.temperature = TemperatureParam::from_tau();
  return model;
}

void ClipModel::for_each_param(const ParamVisitor& visit) {
  image.for_each_param("image.", visit);
  text.for_each_param("text.", visit);
  visit("log_inv_tau", temperature.log_inv_tau, ParamKind::kNorm);
}

Tensor normalize_pixels(const Tensor& images) {
  std::vector<double> out(images.data().begin(), images.data().end());
  for (double& v : out) v = 2.0 * v - 1.0;
  return Tensor::from(images.shape(), std::move(out));
}

Tensor ClipModel::encode_images(const Tensor& images) const { return encoder_forward(normalize_pixels(images), image); }

Tensor ClipModel::encode_texts(const std::vector<std::string>& texts) const {
  return encoder_forward(tokenize_batch(texts, config.text.context_len), text);
}

Tensor load_batch_images(const std::vector<PairedRecord>& records, const std::filesystem::path& base_dir) {
  std::vector<Tensor> images;
  images.reserve(records.size());
  for (const auto& r : records) images.push_back(load_image(r.image_source, base_dir));
  return stack_images(images);
}

namespace {

Tensor concat_rows(const std::vector<Tensor>& parts) {
  std::vector<double> data;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    rows += p.dim(0);
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return Tensor::from({rows, parts.front().dim(1)}, std::move(data));
}

}  // namespace

BatchEmbeddings embed_records(const ClipModel& model, const std::vector<PairedRecord>& records,
                              const std::filesystem::path& base_dir, std::size_t batch) {
  RWKV_CHECK(!records.empty(), "embed_records: no records");
  RWKV_CHECK(batch > 0, "embed_records: batch must be positive");
  NoGradGuard no_grad;
  std::vector<Tensor> image_parts, text_parts;
  for (std::size_t begin = 0; begin < records.size(); begin += batch) {
    const std::size_t end = std::min(records.size(), begin + batch);
    std::vector<PairedRecord> chunk(records.begin() + static_cast<std::ptrdiff_t>(begin),
                                    records.begin() + static_cast<std::ptrdiff_t>(end));
    Tensor images = load_batch_images(chunk, base_dir);
    if (images.dim(1) != model.config.image.image_size || images.dim(2) != model.config.image.image_size)
      throw Error("image size " + shape_str(images.shape()) + " does not match the model's image_size " +
                  std::to_string(model.config.image.image_size));
    image_parts.push_back(model.encode_images(images));
    std::vector<std::string> texts;
    for (const auto& r : chunk) texts.push_back(r.raw_text);
    text_parts.push_back(model.encode_texts(texts));
  }
  return {concat_rows(image_parts), concat_rows(text_parts)};
}

RetrievalReport retrieval_report(const BatchEmbeddings& embeddings) {
  Tensor sim;
  {
    NoGradGuard no_grad;
    sim = similarity_matrix(embeddings);
  }
  RetrievalReport report;
  report.queries = embeddings.size();
  const std::array<std::size_t, 3> ks = {1, 5, 10};
  for (std::size_t i = 0; i < ks.size(); ++i) {
    report.image_to_text[i] = recall_at_k(sim, std::min(ks[i], report.queries), RetrievalDirection::kImageToText);
    report.text_to_image[i] = recall_at_k(sim, std::min(ks[i], report.queries), RetrievalDirection::kTextToImage);
  }
  return report;
}

nlohmann::json RetrievalReport::to_json() const {
  auto dir = [](const std::array<double, 3>& r) { return nlohmann::json{{"R@1", r[0]}, {"R@5", r[1]}, {"R@10", r[2]}}; };
  return {{"queries", queries}, {"image_to_text", dir(image_to_text)}, {"text_to_image", dir(text_to_image)}};
}

}  // namespace rwkv_clip
