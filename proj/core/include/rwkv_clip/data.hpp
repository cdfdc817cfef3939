#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rwkv_clip/encoder.hpp"
#include "rwkv_clip/tensor.hpp"

namespace rwkv_clip {

// ---- records ------------------------------------------------------------------

/// One image-text training record with its text variants and detection tags.
struct PairedRecord {
  std::string id;
  std::string image_source;  // image file path, or a "toy:" spec string
  std::string raw_text;
  std::optional<std::string> synthetic_caption;
  std::optional<std::string> generated_description;
  std::vector<std::string> tags;

  void validate() const;
  bool operator==(const PairedRecord&) const = default;
};

nlohmann::json record_to_json(const PairedRecord& record);
PairedRecord record_from_json(const nlohmann::json& j);

std::vector<PairedRecord> read_jsonl(std::istream& in);
std::vector<PairedRecord> read_jsonl(const std::filesystem::path& path);
void write_jsonl(std::ostream& out, const std::vector<PairedRecord>& records);
void write_jsonl(const std::filesystem::path& path, const std::vector<PairedRecord>& records);

// ---- text augmentation ------------------------------------------------------------

enum class TextVariant { kRaw = 0, kSynthetic, kGenerated };
const char* text_variant_name(TextVariant variant);
std::optional<std::string> text_of(const PairedRecord& record, TextVariant variant);

/// Uniform choice among the variants present in the record (raw, synthetic,
/// generated). Deterministic in `seed`.
TextVariant sample_variant(const PairedRecord& record, std::uint64_t seed);
std::string sample_text(const PairedRecord& record, std::uint64_t seed);

// ---- byte-level tokenizer -------------------------------------------------------------

inline constexpr std::size_t kBosId = 1;
inline constexpr std::size_t kEosId = 2;
inline constexpr std::size_t kByteOffset = 3;
inline constexpr std::size_t kByteVocabSize = 256 + kByteOffset;

/// BOS + (byte + 3)... + EOS, truncated to context_len with EOS kept last,
/// right-padded with 0.
std::vector<std::size_t> tokenize(std::string_view text, std::size_t context_len);
/// Inverse of tokenize; special ids are dropped.
std::string detokenize(std::span<const std::size_t> ids);
/// Untruncated token length including BOS and EOS.
std::size_t token_count(std::string_view text);
TextBatch tokenize_batch(const std::vector<std::string>& texts, std::size_t context_len);

// ---- procedural toy corpus ---------------------------------------------------------

enum class ToyShape { kCircle = 0, kSquare, kStripes, kChecker };
inline constexpr std::array<ToyShape, 4> kAllToyShapes = {ToyShape::kCircle, ToyShape::kSquare, ToyShape::kStripes,
                                                          ToyShape::kChecker};
const char* toy_shape_name(ToyShape shape);

struct ToyColor {
  const char* name;
  std::uint8_t r, g, b;
};
const std::array<ToyColor, 8>& toy_palette();

/// Deterministic description of one toy image.
struct ToySpec {
  std::uint64_t seed = 0;
  std::size_t canvas = 32;
  ToyShape shape = ToyShape::kCircle;
  std::size_t fill = 0;        // palette index
  std::size_t background = 1;  // palette index, differs from fill

  void validate() const;
  /// "toy:shape=circle;fill=red;bg=blue;seed=3;size=32"
  std::string to_source() const;
  static ToySpec parse(const std::string& source);
  static bool is_toy_source(const std::string& source);
};

/// Rasterized [canvas, canvas, 3] image with values byte/255 in [0, 1].
Tensor render_toy(const ToySpec& spec);

struct CaptionTriple {
  std::string raw;
  std::string synthetic;
  std::string generated;
};
/// Three distinct phrasings of the same (shape, fill, background) fact.
CaptionTriple toy_captions(const ToySpec& spec);
std::vector<std::string> toy_tags(const ToySpec& spec);
PairedRecord toy_record(const ToySpec& spec, std::string id, bool with_generated = true);

struct ToyCorpus {
  std::vector<PairedRecord> train;
  std::vector<PairedRecord> heldout;
};

/// Train records cycle through all (shape, fill, background) combinations in
/// shuffled rounds. Held-out records use distinct combinations, each rendered
/// with its own seed, so every held-out pair is uniquely identifiable.
ToyCorpus make_toy_corpus(std::size_t train, std::size_t heldout, std::uint64_t seed, std::size_t canvas = 32,
                          bool with_generated = true);

// ---- images -------------------------------------------------------------------------

/// Binary PPM (P6) I/O for [H, W, 3] tensors in [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
/// Renders toy specs, otherwise reads a PPM relative to base_dir.
Tensor load_image(const std::string& source, const std::filesystem::path& base_dir = {});
/// Stacks [H, W, 3] images into [B, H, W, 3].
Tensor stack_images(const std::vector<Tensor>& images);

// ---- description fusion prompt ---------------------------------------------------------

extern const std::string_view kFusionPromptTemplate;
/// Fills the fusion instruction template; tags are joined with ", ".
std::string build_fusion_prompt(const std::string& raw, const std::string& synthetic,
                                const std::vector<std::string>& tags);

// ---- caption statistics ------------------------------------------------------------------

struct TextTypeStats {
  std::string type;
  std::size_t count = 0;
  double mean_tokens = 0.0;
  std::map<std::size_t, std::size_t> histogram;  // bucket lower bound -> count
  std::optional<double> mean_similarity;
};

struct CaptionStatsReport {
  std::vector<TextTypeStats> types;  // raw, synthetic, generated
  nlohmann::json to_json() const;
};

struct EncoderPair {
  std::function<std::vector<double>(const PairedRecord&)> image;
  std::function<std::vector<double>(const std::string&)> text;
};

using TokenCounter = std::function<std::size_t(const std::string&)>;

/// Token-count histogram and mean per text type; mean image-text cosine
/// similarity per type when encoders are given.
CaptionStatsReport caption_stats(const std::vector<PairedRecord>& records, const TokenCounter& count_tokens = {},
                                 std::size_t bucket_width = 8, const EncoderPair* encoders = nullptr);

}  // namespace rwkv_clip
