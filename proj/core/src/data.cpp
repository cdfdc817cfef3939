#include "rwkv_clip/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace rwkv_clip {

// ---- records ---------------------------------------------------------------------------

void PairedRecord::validate() const {
  RWKV_CHECK(!raw_text.empty(), "record '" + id + "': raw_text must be non-empty");
}

nlohmann::json record_to_json(const PairedRecord& r) {
  nlohmann::json j = {{"id", r.id}, {"image_source", r.image_source}, {"raw_text", r.raw_text}, {"tags", r.tags}};
  if (r.synthetic_caption) j["synthetic_caption"] = *r.synthetic_caption;
  if (r.generated_description) j["generated_description"] = *r.generated_description;
  return j;
}

PairedRecord record_from_json(const nlohmann::json& j) {
  RWKV_CHECK(j.is_object(), "record must be a JSON object");
  PairedRecord r;
  auto optional_string = [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<std::string>();
  };
  try {
    r.id = j.value("id", std::string{});
    r.image_source = j.value("image_source", std::string{});
    r.raw_text = j.at("raw_text").get<std::string>();
    r.synthetic_caption = optional_string("synthetic_caption");
    r.generated_description = optional_string("generated_description");
    if (j.contains("tags") && !j.at("tags").is_null()) r.tags = j.at("tags").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("record: ") + e.what());
  }
  r.validate();
  return r;
}

std::vector<PairedRecord> read_jsonl(std::istream& in) {
  std::vector<PairedRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw Error("jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

std::vector<PairedRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return read_jsonl(in);
}

void write_jsonl(std::ostream& out, const std::vector<PairedRecord>& records) {
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

void write_jsonl(const std::filesystem::path& path, const std::vector<PairedRecord>& records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_jsonl(out, records);
}

// ---- augmentation -------------------------------------------------------------------------

const char* text_variant_name(TextVariant variant) {
  switch (variant) {
    case TextVariant::kRaw: return "raw";
    case TextVariant::kSynthetic: return "synthetic";
    case TextVariant::kGenerated: return "generated";
  }
  return "?";
}

std::optional<std::string> text_of(const PairedRecord& record, TextVariant variant) {
  switch (variant) {
    case TextVariant::kRaw:
      return record.raw_text.empty() ? std::nullopt : std::optional<std::string>(record.raw_text);
    case TextVariant::kSynthetic: return record.synthetic_caption;
    case TextVariant::kGenerated: return record.generated_description;
  }
  return std::nullopt;
}

TextVariant sample_variant(const PairedRecord& record, std::uint64_t seed) {
  std::vector<TextVariant> present;
  for (auto v : {TextVariant::kRaw, TextVariant::kSynthetic, TextVariant::kGenerated})
    if (text_of(record, v)) present.push_back(v);
  if (present.empty()) throw Error("record '" + record.id + "': no text available");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, present.size() - 1);
  return present[pick(rng)];
}

std::string sample_text(const PairedRecord& record, std::uint64_t seed) {
  return *text_of(record, sample_variant(record, seed));
}

// ---- tokenizer --------------------------------------------------------------------------------

std::vector<std::size_t> tokenize(std::string_view text, std::size_t context_len) {
  RWKV_CHECK(context_len >= 2, "tokenize: context_len must hold BOS and EOS");
  std::vector<std::size_t> ids(context_len, kPadId);
  const std::size_t body = std::min(text.size(), context_len - 2);
  ids[0] = kBosId;
  for (std::size_t i = 0; i < body; ++i) ids[i + 1] = static_cast<unsigned char>(text[i]) + kByteOffset;
  ids[body + 1] = kEosId;
  return ids;
}

std::string detokenize(std::span<const std::size_t> ids) {
  std::string out;
  for (auto id : ids) {
    if (id >= kByteOffset && id < kByteVocabSize) out.push_back(static_cast<char>(id - kByteOffset));
  }
  return out;
}

std::size_t token_count(std::string_view text) { return text.size() + 2; }

TextBatch tokenize_batch(const std::vector<std::string>& texts, std::size_t context_len) {
  TextBatch batch{texts.size(), context_len, {}};
  batch.ids.reserve(texts.size() * context_len);
  for (const auto& t : texts) {
    auto ids = tokenize(t, context_len);
    batch.ids.insert(batch.ids.end(), ids.begin(), ids.end());
  }
  return batch;
}

// ---- toy corpus ----------------------------------------------------------------------------------

const char* toy_shape_name(ToyShape shape) {
  switch (shape) {
    case ToyShape::kCircle: return "circle";
    case ToyShape::kSquare: return "square";
    case ToyShape::kStripes: return "stripes";
    case ToyShape::kChecker: return "checker";
  }
  return "?";
}

const std::array<ToyColor, 8>& toy_palette() {
  static const std::array<ToyColor, 8> kPalette = {{{"red", 255, 0, 0},
                                                    {"green", 0, 255, 0},
                                                    {"blue", 0, 0, 255},
                                                    {"yellow", 255, 255, 0},
                                                    {"cyan", 0, 255, 255},
                                                    {"magenta", 255, 0, 255},
                                                    {"white", 255, 255, 255},
                                                    {"black", 0, 0, 0}}};
  return kPalette;
}

namespace {

std::size_t palette_index(const std::string& name) {
  const auto& pal = toy_palette();
  for (std::size_t i = 0; i < pal.size(); ++i)
    if (name == pal[i].name) return i;
  throw Error("unknown toy color '" + name + "'");
}

ToyShape shape_from_name(const std::string& name) {
  for (auto s : kAllToyShapes)
    if (name == toy_shape_name(s)) return s;
  throw Error("unknown toy shape '" + name + "'");
}

}  // namespace

void ToySpec::validate() const {
  RWKV_CHECK(canvas >= 16, "ToySpec: canvas must be at least 16 pixels");
  RWKV_CHECK(fill < toy_palette().size() && background < toy_palette().size(), "ToySpec: color out of range");
  RWKV_CHECK(fill != background, "ToySpec: fill and background colors must differ");
}

std::string ToySpec::to_source() const {
  std::ostringstream os;
  os << "toy:shape=" << toy_shape_name(shape) << ";fill=" << toy_palette()[fill].name
     << ";bg=" << toy_palette()[background].name << ";seed=" << seed << ";size=" << canvas;
  return os.str();
}

bool ToySpec::is_toy_source(const std::string& source) { return source.rfind("toy:", 0) == 0; }

ToySpec ToySpec::parse(const std::string& source) {
  RWKV_CHECK(is_toy_source(source), "not a toy source: " + source);
  ToySpec spec;
  std::istringstream fields(source.substr(4));
  std::string field;
  while (std::getline(fields, field, ';')) {
    auto eq = field.find('=');
    RWKV_CHECK(eq != std::string::npos, "malformed toy field '" + field + "'");
    std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    try {
      if (key == "shape") spec.shape = shape_from_name(value);
      else if (key == "fill") spec.fill = palette_index(value);
      else if (key == "bg") spec.background = palette_index(value);
      else if (key == "seed") spec.seed = std::stoull(value);
      else if (key == "size") spec.canvas = std::stoull(value);
      else throw Error("unknown toy field '" + key + "'");
    } catch (const std::logic_error&) {
      throw Error("malformed toy field '" + field + "'");
    }
  }
  spec.validate();
  return spec;
}

Tensor render_toy(const ToySpec& spec) {
  spec.validate();
  const auto n = static_cast<long>(spec.canvas);
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<long> jitter(-2, 2);
  std::uniform_int_distribution<long> grow(-1, 1);
  const long cx = n / 2 + jitter(rng), cy = n / 2 + jitter(rng);
  const long half = 5 * n / 16 + grow(rng);
  const auto& fg = toy_palette()[spec.fill];
  const auto& bg = toy_palette()[spec.background];
  std::vector<double> data(static_cast<std::size_t>(n * n * 3));
  for (long y = 0; y < n; ++y) {
    for (long x = 0; x < n; ++x) {
      const long dx = x - cx, dy = y - cy;
      const bool in_box = std::abs(2 * dx + 1) <= 2 * half && std::abs(2 * dy + 1) <= 2 * half;
      bool on = false;
      switch (spec.shape) {
        case ToyShape::kCircle: on = (2 * dx + 1) * (2 * dx + 1) + (2 * dy + 1) * (2 * dy + 1) <= 4 * half * half; break;
        case ToyShape::kSquare: on = in_box; break;
        case ToyShape::kStripes: on = in_box && ((dy + half) / 4) % 2 == 0; break;
        case ToyShape::kChecker: on = in_box && (((dx + half) / 6) + ((dy + half) / 6)) % 2 == 0; break;
      }
      const ToyColor& c = on ? fg : bg;
      double* px = data.data() + (y * n + x) * 3;
      px[0] = c.r / 255.0;
      px[1] = c.g / 255.0;
      px[2] = c.b / 255.0;
    }
  }
  return Tensor::from({spec.canvas, spec.canvas, 3}, std::move(data));
}

CaptionTriple toy_captions(const ToySpec& spec) {
  const std::string shape = toy_shape_name(spec.shape);
  const std::string fill = toy_palette()[spec.fill].name;
  const std::string bg = toy_palette()[spec.background].name;
  return {fill + " " + shape + " on " + bg, bg + " bg, " + fill + " " + shape, shape + ": " + fill + " over " + bg};
}

std::vector<std::string> toy_tags(const ToySpec& spec) {
  return {toy_shape_name(spec.shape), toy_palette()[spec.fill].name, toy_palette()[spec.background].name};
}

PairedRecord toy_record(const ToySpec& spec, std::string id, bool with_generated) {
  auto captions = toy_captions(spec);
  PairedRecord r;
  r.id = std::move(id);
  r.image_source = spec.to_source();
  r.raw_text = captions.raw;
  r.synthetic_caption = captions.synthetic;
  if (with_generated) r.generated_description = captions.generated;
  r.tags = toy_tags(spec);
  return r;
}

ToyCorpus make_toy_corpus(std::size_t train, std::size_t heldout, std::uint64_t seed, std::size_t canvas,
                          bool with_generated) {
  struct Combo {
    ToyShape shape;
    std::size_t fill, background;
  };
  std::vector<Combo> combos;
  const std::size_t colors = toy_palette().size();
  for (auto s : kAllToyShapes)
    for (std::size_t f = 0; f < colors; ++f)
      for (std::size_t b = 0; b < colors; ++b)
        if (f != b) combos.push_back({s, f, b});
  RWKV_CHECK(heldout <= combos.size(),
             "make_toy_corpus: at most " + std::to_string(combos.size()) + " distinct held-out records");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(combos.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  auto id_of = [](const char* prefix, std::size_t i) {
    std::ostringstream os;
    os << prefix << '-' << std::setw(5) << std::setfill('0') << i;
    return os.str();
  };
  ToyCorpus corpus;
  std::uint64_t next_seed = seed * 1000003ULL + 1;
  for (std::size_t i = 0; i < heldout; ++i) {
    const auto& c = combos[order[i]];
    ToySpec spec{next_seed++, canvas, c.shape, c.fill, c.background};
    corpus.heldout.push_back(toy_record(spec, id_of("heldout", i), with_generated));
  }
  // Train cycles through every combination in reshuffled rounds so each one
  // appears before any repeats.
  std::vector<std::size_t> round;
  for (std::size_t i = 0; i < train; ++i) {
    if (i % combos.size() == 0) {
      round = order;
      std::shuffle(round.begin(), round.end(), rng);
    }
    const auto& c = combos[round[i % combos.size()]];
    ToySpec spec{next_seed++, canvas, c.shape, c.fill, c.background};
    corpus.train.push_back(toy_record(spec, id_of("train", i), with_generated));
  }
  return corpus;
}

// ---- images ------------------------------------------------------------------------------------------

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  RWKV_CHECK(image.ndim() == 3 && image.dim(2) == 3, "write_ppm: image must be [H,W,3]");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  for (double v : image.data()) {
    const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    out.put(static_cast<char>(byte));
  }
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image " + path.string());
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P6" || maxval != 255 || width == 0 || height == 0)
    throw Error(path.string() + ": only 8-bit binary PPM (P6) images are supported");
  in.get();
  std::vector<unsigned char> bytes(width * height * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw Error(path.string() + ": truncated image");
  std::vector<double> data(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) data[i] = bytes[i] / 255.0;
  return Tensor::from({height, width, 3}, std::move(data));
}

Tensor load_image(const std::string& source, const std::filesystem::path& base_dir) {
  if (ToySpec::is_toy_source(source)) return render_toy(ToySpec::parse(source));
  std::filesystem::path path(source);
  if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
  return read_ppm(path);
}

Tensor stack_images(const std::vector<Tensor>& images) {
  RWKV_CHECK(!images.empty(), "stack_images: no images");
  const Shape& first = images.front().shape();
  std::vector<double> data;
  data.reserve(images.size() * images.front().numel());
  for (const auto& img : images) {
    if (img.shape() != first)
      throw Error("stack_images: image " + shape_str(img.shape()) + " differs from " + shape_str(first));
    data.insert(data.end(), img.data().begin(), img.data().end());
  }
  Shape shape{images.size()};
  shape.insert(shape.end(), first.begin(), first.end());
  return Tensor::from(std::move(shape), std::move(data));
}

// ---- fusion prompt ---------------------------------------------------------------------------------

const std::string_view kFusionPromptTemplate =
    "Please merge the information from the given raw text and the synthetic caption with the help of the highly "
    "relevant detection tags. The raw caption offers detailed real-world information, yet it suffers from flaws in "
    "sentence structure and grammar. The synthetic caption exhibits impeccable sentence structure but often lacks "
    "in-depth real-world details and may contain false information. The highly relevant detection tags are provided "
    "to enrich the semantic information of the raw caption, while some are redundant and noisy. You are a great "
    "information integration and summary expert, you are also good at enriching semantic information. Ensure a "
    "well-structured sentence while retaining the detailed real-world information provided in the raw caption. "
    "Avoid simply concatenating the sentences and avoid adding external information to describe. Correctness and "
    "simplify sentences finally. Raw caption:<raw caption>, synthetic caption:<synthetic caption>, and highly "
    "relevant detection tags:<detection tags>";

std::string build_fusion_prompt(const std::string& raw, const std::string& synthetic,
                                const std::vector<std::string>& tags) {
  RWKV_CHECK(!raw.empty(), "build_fusion_prompt: raw caption must be non-empty");
  std::string joined;
  for (std::size_t i = 0; i < tags.size(); ++i) joined += (i ? ", " : "") + tags[i];
  std::string out(kFusionPromptTemplate);
  // Slot offsets come from the template, and filling runs back to front, so
  // substituted text is never searched again.
  for (const auto& [slot, value] : {std::pair<std::string_view, const std::string*>{"<detection tags>", &joined},
                                    {"<synthetic caption>", &synthetic},
                                    {"<raw caption>", &raw}}) {
    const auto pos = kFusionPromptTemplate.rfind(slot);
    out.replace(pos, slot.size(), *value);
  }
  return out;
}

// ---- caption statistics --------------------------------------------------------------------------------

nlohmann::json CaptionStatsReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& t : types) {
    nlohmann::json hist = nlohmann::json::object();
    for (const auto& [bucket, count] : t.histogram) hist[std::to_string(bucket)] = count;
    j[t.type] = {{"count", t.count},
                 {"mean_tokens", t.mean_tokens},
                 {"histogram", hist},
                 {"mean_similarity", t.mean_similarity ? nlohmann::json(*t.mean_similarity) : nlohmann::json()}};
  }
  return j;
}

CaptionStatsReport caption_stats(const std::vector<PairedRecord>& records, const TokenCounter& count_tokens,
                                 std::size_t bucket_width, const EncoderPair* encoders) {
  RWKV_CHECK(!records.empty(), "caption_stats: no records");
  RWKV_CHECK(bucket_width > 0, "caption_stats: bucket width must be positive");
  TokenCounter counter = count_tokens ? count_tokens : [](const std::string& s) { return token_count(s); };
  CaptionStatsReport report;
  std::vector<std::vector<double>> image_cache(records.size());
  for (auto variant : {TextVariant::kRaw, TextVariant::kSynthetic, TextVariant::kGenerated}) {
    TextTypeStats stats;
    stats.type = text_variant_name(variant);
    double token_sum = 0.0, sim_sum = 0.0;
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto text = text_of(records[i], variant);
      if (!text) continue;
      const std::size_t tokens = counter(*text);
      ++stats.count;
      token_sum += static_cast<double>(tokens);
      ++stats.histogram[(tokens / bucket_width) * bucket_width];
      if (encoders) {
        if (image_cache[i].empty()) image_cache[i] = encoders->image(records[i]);
        auto t = encoders->text(*text);
        const auto& im = image_cache[i];
        RWKV_CHECK(t.size() == im.size(), "caption_stats: encoder widths differ");
        double dot = 0.0, ni = 0.0, nt = 0.0;
        for (std::size_t j = 0; j < t.size(); ++j) {
          dot += im[j] * t[j];
          ni += im[j] * im[j];
          nt += t[j] * t[j];
        }
        sim_sum += (ni > 0 && nt > 0) ? dot / std::sqrt(ni * nt) : 0.0;
      }
    }
    if (stats.count > 0) {
      stats.mean_tokens = token_sum / static_cast<double>(stats.count);
      if (encoders) stats.mean_similarity = sim_sum / static_cast<double>(stats.count);
    }
    report.types.push_back(std::move(stats));
  }
  return report;
}

}  // namespace rwkv_clip
