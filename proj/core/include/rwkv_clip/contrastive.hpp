#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rwkv_clip/tensor.hpp"

namespace rwkv_clip {

/// Paired image/text embeddings [N, D], rows L2-normalized.
struct BatchEmbeddings {
  Tensor image;
  Tensor text;

  std::size_t size() const { return image.dim(0); }
  void validate(double norm_tol = 1e-6) const;
};

/// Temperature learned as log(1/tau); tau is clamped to [1/100, 100].
struct TemperatureParam {
  Tensor log_inv_tau;

  static constexpr double kInitialTau = 0.07;
  static constexpr double kMinTau = 0.01;
  static constexpr double kMaxTau = 100.0;

  static TemperatureParam from_tau(double tau = kInitialTau);
  double tau() const;
  /// Differentiable 1/tau with the clamp applied.
  Tensor inverse_tau() const;
};

/// Similarity I T^T, [N, N].
Tensor similarity_matrix(const BatchEmbeddings& e);

/// Symmetric InfoNCE in sum form:
///   L = -sum_i [ log softmax_row_i(S/tau)_ii + log softmax_col_i(S/tau)_ii ]
Tensor clip_loss(const BatchEmbeddings& e, const TemperatureParam& tau);
/// L / (2N), the batch-size independent form used for optimization.
Tensor clip_loss_mean(const BatchEmbeddings& e, const TemperatureParam& tau);
/// The sum-form loss for already scaled logits S/tau.
Tensor clip_loss_from_logits(const Tensor& logits);

enum class RetrievalDirection { kImageToText, kTextToImage };

/// Fraction of queries whose true match (the diagonal) ranks within the top k.
/// Ties are broken toward the lower candidate index.
double recall_at_k(const Tensor& similarity, std::size_t k, RetrievalDirection direction);

/// "a photo of a {label}." -> "a photo of a dog."
std::string fill_template(const std::string& tmpl, const std::string& label);

/// Encodes a list of strings into L2-normalized rows [n, D].
using TextEncoderFn = std::function<Tensor(const std::vector<std::string>&)>;

/// Class prototypes: each label expanded through every template, encoded,
/// averaged and re-normalized. Returns [labels, D].
Tensor class_prototypes(const std::vector<std::string>& templates, const std::vector<std::string>& labels,
                        const TextEncoderFn& encode_text);

/// Index of the most similar prototype for every image row.
std::vector<std::size_t> zeroshot_classify(const Tensor& image_emb, const std::vector<std::string>& templates,
                                           const std::vector<std::string>& labels, const TextEncoderFn& encode_text);

/// Argmax of image_emb . prototypes^T per row, lower index on ties.
std::vector<std::size_t> nearest_prototype(const Tensor& image_emb, const Tensor& prototypes);

}  // namespace rwkv_clip
