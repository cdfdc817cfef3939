#include "run_config.hpp"

#include <fstream>
#include <sstream>

namespace rwkv_clip::cli {

namespace {

std::pair<std::size_t, std::size_t> line_and_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, column = 1;
  for (std::size_t i = 0; i < text.size() && i + 1 < byte; ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return {line, column};
}

template <typename T>
T get_as(const nlohmann::json& j, const char* section, const char* key) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw UsageError(std::string("config: ") + section + "." + key + " has the wrong type");
  }
}

ToyDataConfig toy_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("config: data.toy must be an object");
  ToyDataConfig toy;
  for (const auto& [key, value] : j.items()) {
    if (key == "train") toy.train = get_as<std::size_t>(value, "data.toy", "train");
    else if (key == "heldout") toy.heldout = get_as<std::size_t>(value, "data.toy", "heldout");
    else if (key == "seed") toy.seed = get_as<std::uint64_t>(value, "data.toy", "seed");
    else if (key == "canvas") toy.canvas = get_as<std::size_t>(value, "data.toy", "canvas");
    else if (key == "generated") toy.generated = get_as<bool>(value, "data.toy", "generated");
    else throw UsageError("config: unknown key 'data.toy." + key + "'");
  }
  if (toy.train == 0) throw UsageError("config: data.toy.train must be positive");
  return toy;
}

DataConfig data_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw UsageError("config: data must be an object");
  DataConfig data;
  auto path_of = [&](const nlohmann::json& v, const char* key) {
    std::filesystem::path p = get_as<std::string>(v, "data", key);
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "toy") data.toy = toy_from_json(value);
    else if (key == "train") data.train_jsonl = path_of(value, "train");
    else if (key == "heldout") data.heldout_jsonl = path_of(value, "heldout");
    else if (key == "image_dir") data.image_dir = path_of(value, "image_dir");
    else throw UsageError("config: unknown key 'data." + key + "'");
  }
  if (data.toy.has_value() == !data.train_jsonl.empty())
    throw UsageError("config: data needs exactly one of 'toy' or 'train'");
  if (data.toy && (!data.heldout_jsonl.empty() || !data.image_dir.empty()))
    throw UsageError("config: data.toy cannot be combined with JSONL paths");
  return data;
}

}  // namespace

nlohmann::json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    auto [line, column] = line_and_column(text, e.byte);
    std::string detail = e.what();
    if (auto pos = detail.find("] "); pos != std::string::npos) detail = detail.substr(pos + 2);
    throw UsageError(origin + ":" + std::to_string(line) + ":" + std::to_string(column) + ": invalid JSON: " + detail);
  }
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_json_text(buffer.str(), path.string());
}

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw UsageError("config: top level must be a JSON object");
  RunConfig config;
  nlohmann::json model = nlohmann::json::object();
  bool has_data = false;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "image" || key == "text") model[key] = value;
      else if (key == "train") config.train = train_config_from_json(value);
      else if (key == "data") {
        config.data = data_from_json(value, base_dir);
        has_data = true;
      } else {
        throw UsageError("config: unknown key '" + key + "'");
      }
    }
    config.model = model_config_from_json(model);
  } catch (const Error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  if (!has_data) throw UsageError("config: missing 'data' section");
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(read_json_file(path), path.parent_path());
}

nlohmann::json run_config_to_json(const RunConfig& config) {
  nlohmann::json j = model_config_to_json(config.model);
  j["train"] = train_config_to_json(config.train);
  nlohmann::json data = nlohmann::json::object();
  if (config.data.toy) {
    const auto& t = *config.data.toy;
    data["toy"] = {{"train", t.train}, {"heldout", t.heldout}, {"canvas", t.canvas}, {"generated", t.generated}};
    if (t.seed) data["toy"]["seed"] = *t.seed;
  } else {
    data["train"] = config.data.train_jsonl.string();
    if (!config.data.heldout_jsonl.empty()) data["heldout"] = config.data.heldout_jsonl.string();
    if (!config.data.image_dir.empty()) data["image_dir"] = config.data.image_dir.string();
  }
  j["data"] = data;
  return j;
}

Datasets load_datasets(const DataConfig& data, std::uint64_t seed) {
  Datasets out;
  if (data.toy) {
    const auto& t = *data.toy;
    ToyCorpus corpus = make_toy_corpus(t.train, t.heldout, t.seed.value_or(seed), t.canvas, t.generated);
    out.train = std::move(corpus.train);
    out.heldout = std::move(corpus.heldout);
    return out;
  }
  out.image_dir = data.image_dir.empty() ? data.train_jsonl.parent_path() : data.image_dir;
  out.train = read_jsonl(data.train_jsonl);
  if (!data.heldout_jsonl.empty()) out.heldout = read_jsonl(data.heldout_jsonl);
  return out;
}

}  // namespace rwkv_clip::cli
