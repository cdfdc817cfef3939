#include "rwkv_clip/contrastive.hpp"

#include <cmath>

namespace rwkv_clip {

void BatchEmbeddings::validate(double norm_tol) const {
  RWKV_CHECK(image.defined() && text.defined(), "BatchEmbeddings: missing tensor");
  RWKV_CHECK(image.ndim() == 2 && image.shape() == text.shape(),
             "BatchEmbeddings: image " + shape_str(image.shape()) + " and text " + shape_str(text.shape()) +
                 " must both be [N,D]");
  const std::size_t n = image.dim(0), d = image.dim(1);
  for (const Tensor* t : {&image, &text}) {
    auto data = t->data();
    for (std::size_t i = 0; i < n; ++i) {
      double ss = 0.0;
      for (std::size_t j = 0; j < d; ++j) ss += data[i * d + j] * data[i * d + j];
      if (std::abs(std::sqrt(ss) - 1.0) > norm_tol)
        throw Error("BatchEmbeddings: row " + std::to_string(i) + " is not unit norm");
    }
  }
}

TemperatureParam TemperatureParam::from_tau(double tau) {
  RWKV_CHECK(tau >= kMinTau && tau <= kMaxTau, "temperature out of range");
  return {Tensor::scalar(std::log(1.0 / tau), true)};
}

double TemperatureParam::tau() const {
  const double lo = std::log(1.0 / kMaxTau), hi = std::log(1.0 / kMinTau);
  return std::exp(-std::clamp(log_inv_tau.item(), lo, hi));
}

Tensor TemperatureParam::inverse_tau() const {
  return exp_op(clamp(log_inv_tau, std::log(1.0 / kMaxTau), std::log(1.0 / kMinTau)));
}

Tensor similarity_matrix(const BatchEmbeddings& e) {
  e.validate();
  return matmul(e.image, transpose(e.text));
}

Tensor clip_loss_from_logits(const Tensor& logits) {
  RWKV_CHECK(logits.ndim() == 2 && logits.dim(0) == logits.dim(1), "clip_loss: logits must be square");
  RWKV_CHECK(logits.dim(0) >= 2, "clip_loss: needs N >= 2");
  Tensor rows = sum(diagonal(log_softmax(logits)));
  Tensor cols = sum(diagonal(log_softmax(transpose(logits))));
  return affine(add(rows, cols), -1.0, 0.0);
}

Tensor clip_loss(const BatchEmbeddings& e, const TemperatureParam& tau) {
  RWKV_CHECK(e.size() >= 2, "clip_loss: needs N >= 2");
  return clip_loss_from_logits(scale_by(similarity_matrix(e), tau.inverse_tau()));
}

Tensor clip_loss_mean(const BatchEmbeddings& e, const TemperatureParam& tau) {
  return affine(clip_loss(e, tau), 1.0 / (2.0 * static_cast<double>(e.size())), 0.0);
}

double recall_at_k(const Tensor& similarity, std::size_t k, RetrievalDirection direction) {
  RWKV_CHECK(similarity.ndim() == 2 && similarity.dim(0) == similarity.dim(1),
             "recall_at_k: similarity must be square");
  const std::size_t n = similarity.dim(0);
  RWKV_CHECK(k >= 1 && k <= n, "recall_at_k: k must be in [1, N]");
  auto s = similarity.data();
  auto at = [&](std::size_t query, std::size_t cand) {
    return direction == RetrievalDirection::kImageToText ? s[query * n + cand] : s[cand * n + query];
  };
  std::size_t hits = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double target = at(q, q);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = at(q, j);
      if (v > target || (v == target && j < q)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

std::string fill_template(const std::string& tmpl, const std::string& label) {
  static const std::string kSlot = "{label}";
  std::string out = tmpl;
  for (auto pos = out.find(kSlot); pos != std::string::npos; pos = out.find(kSlot, pos + label.size()))
    out.replace(pos, kSlot.size(), label);
  return out;
}

Tensor class_prototypes(const std::vector<std::string>& templates, const std::vector<std::string>& labels,
                        const TextEncoderFn& encode_text) {
  RWKV_CHECK(!templates.empty(), "zeroshot: empty template set");
  RWKV_CHECK(!labels.empty(), "zeroshot: no labels");
  std::vector<double> protos;
  std::size_t dim = 0;
  for (const auto& label : labels) {
    std::vector<std::string> prompts;
    for (const auto& t : templates) prompts.push_back(fill_template(t, label));
    Tensor emb = encode_text(prompts);
    RWKV_CHECK(emb.ndim() == 2 && emb.dim(0) == prompts.size(), "zeroshot: text encoder returned wrong shape");
    dim = emb.dim(1);
    std::vector<double> mean_row(dim, 0.0);
    for (std::size_t i = 0; i < prompts.size(); ++i)
      for (std::size_t j = 0; j < dim; ++j) mean_row[j] += emb.data()[i * dim + j];
    double norm = 0.0;
    for (double v : mean_row) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : mean_row) v = norm > 0 ? v / norm : 0.0;
    protos.insert(protos.end(), mean_row.begin(), mean_row.end());
  }
  return Tensor::from({labels.size(), dim}, std::move(protos));
}

std::vector<std::size_t> nearest_prototype(const Tensor& image_emb, const Tensor& prototypes) {
  RWKV_CHECK(image_emb.ndim() == 2 && prototypes.ndim() == 2 && image_emb.dim(1) == prototypes.dim(1),
             "nearest_prototype: embedding widths differ");
  const std::size_t n = image_emb.dim(0), classes = prototypes.dim(0), d = image_emb.dim(1);
  std::vector<std::size_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += image_emb.data()[i * d + j] * prototypes.data()[c * d + j];
      if (dot > best) {
        best = dot;
        out[i] = c;
      }
    }
  }
  return out;
}

std::vector<std::size_t> zeroshot_classify(const Tensor& image_emb, const std::vector<std::string>& templates,
                                           const std::vector<std::string>& labels, const TextEncoderFn& encode_text) {
  return nearest_prototype(image_emb, class_prototypes(templates, labels, encode_text));
}

}  // namespace rwkv_clip
