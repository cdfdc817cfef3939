#include "cli.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "rwkv_clip/grad_suite.hpp"
#include "rwkv_clip/llm.hpp"
#include "rwkv_clip/wkv.hpp"
#include "run_config.hpp"
#include "svg_plot.hpp"

namespace rwkv_clip::cli {

namespace fs = std::filesystem;

namespace {

// ---- shared helpers -------------------------------------------------------------

void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw Error("output directory '" + dir.string() + "' is not writable");
  }
  fs::remove(probe, ec);
}

std::vector<std::string> read_lines(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw UsageError(std::string("cannot read ") + what + " file '" + path.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    lines.push_back(line.substr(start));
  }
  if (lines.empty()) throw UsageError(std::string(what) + " file '" + path.string() + "' is empty");
  return lines;
}

std::string format_recalls(const std::array<double, 3>& r) {
  return fmt::format("R@1 {:.4f}  R@5 {:.4f}  R@10 {:.4f}", r[0], r[1], r[2]);
}

void print_retrieval(std::ostream& out, const RetrievalReport& report) {
  out << "image->text  " << format_recalls(report.image_to_text) << "\n";
  out << "text->image  " << format_recalls(report.text_to_image) << "\n";
}

ClipModel load_model(const fs::path& checkpoint) { return model_from_checkpoint(load_checkpoint(checkpoint)); }

fs::path default_image_dir(const fs::path& jsonl, const std::string& image_dir) {
  return image_dir.empty() ? jsonl.parent_path() : fs::path(image_dir);
}

Tensor encode_record_images(const ClipModel& model, const std::vector<PairedRecord>& records,
                            const fs::path& base_dir, std::size_t batch) {
  NoGradGuard no_grad;
  std::vector<double> rows;
  std::size_t dim = 0;
  for (std::size_t start = 0; start < records.size(); start += batch) {
    std::vector<PairedRecord> chunk(records.begin() + static_cast<std::ptrdiff_t>(start),
                                    records.begin() + static_cast<std::ptrdiff_t>(std::min(records.size(), start + batch)));
    Tensor images = load_batch_images(chunk, base_dir);
    const auto& cfg = model.config.image;
    if (images.dim(1) != cfg.image_size || images.dim(2) != cfg.image_size)
      throw Error("dataset images are " + shape_str({images.dim(1), images.dim(2)}) + " but the checkpoint expects " +
                  std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
    Tensor emb = model.encode_images(images);
    dim = emb.dim(1);
    rows.insert(rows.end(), emb.data().begin(), emb.data().end());
  }
  return Tensor::from({records.size(), dim}, std::move(rows));
}

// ---- train ------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::string out;
  bool deterministic = false;
  bool quiet = false;
};

int cmd_train(const TrainArgs& args, std::ostream& out) {
  RunConfig config = load_run_config(args.config);
  if (args.seed) config.train.seed = *args.seed;
  if (args.epochs) config.train.epochs = *args.epochs;
  if (args.deterministic) config.train.deterministic = true;
  try {
    config.train.validate();
  } catch (const Error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }

  const fs::path out_dir = args.out;
  ensure_writable_dir(out_dir);
  Datasets data = load_datasets(config.data, config.train.seed);
  write_text_file(out_dir / "config.json", run_config_to_json(config).dump(2) + "\n");
  if (config.data.toy && !data.heldout.empty()) write_jsonl(out_dir / "heldout.jsonl", data.heldout);

  out << fmt::format("training on {} records ({} held out), {} epochs, seed {}\n", data.train.size(),
                     data.heldout.size(), config.train.epochs, config.train.seed);
  TrainOptions options;
  options.out_dir = out_dir;
  options.image_base_dir = data.image_dir;
  const auto start = std::chrono::steady_clock::now();
  if (!args.quiet) {
    options.on_epoch = [&](std::size_t epoch, double mean_loss) {
      out << fmt::format("epoch {:>3}/{}  loss {:.5f}\n", epoch + 1, config.train.epochs, mean_loss) << std::flush;
    };
  }
  TrainResult result = train(data.train, config.model, config.train, options);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  PlotSeries loss{"train loss", {}, {}};
  for (const auto& m : result.history) {
    loss.x.push_back(static_cast<double>(m.step));
    loss.y.push_back(m.loss);
  }
  write_text_file(out_dir / "loss.svg", line_plot_svg({loss}, {"Training loss", "step", "loss"}));
  out << fmt::format("trained {} steps in {:.1f} s\n", result.history.size(), seconds);

  if (!data.heldout.empty()) {
    RetrievalReport report = retrieval_report(embed_records(result.model, data.heldout, data.image_dir));
    print_retrieval(out, report);
    nlohmann::json j = report.to_json();
    j["mode"] = "retrieval";
    write_text_file(out_dir / "eval.json", j.dump(2) + "\n");
  }
  out << "checkpoint: " << (out_dir / "checkpoint.bin").string() << "\n";
  out << "metrics: " << (out_dir / "metrics.csv").string() << "\n";
  return kExitOk;
}

// ---- eval ---------------------------------------------------------------------------

struct EvalArgs {
  std::string mode = "retrieval";
  std::string checkpoint;
  std::string data;
  std::string image_dir;
  std::string labels;
  std::string templates;
  std::string report;
  std::size_t batch = 64;
};

int cmd_eval(const EvalArgs& args, std::ostream& out) {
  if (args.mode == "zeroshot" && (args.labels.empty() || args.templates.empty()))
    throw UsageError("eval zeroshot needs --labels and --templates");
  std::vector<std::string> labels, templates;
  if (args.mode == "zeroshot") {
    labels = read_lines(args.labels, "labels");
    templates = read_lines(args.templates, "templates");
  }
  const ClipModel model = load_model(args.checkpoint);
  const auto records = read_jsonl(fs::path(args.data));
  if (records.empty()) throw Error("dataset '" + args.data + "' has no records");
  const fs::path base = default_image_dir(args.data, args.image_dir);

  nlohmann::json report;
  if (args.mode == "retrieval") {
    RetrievalReport r = retrieval_report(embed_records(model, records, base, args.batch));
    print_retrieval(out, r);
    report = {{"mode", "retrieval"}, {"queries", r.queries}};
    report.update(r.to_json());
  } else {
    std::vector<std::size_t> truth;
    std::vector<PairedRecord> used;
    for (const auto& rec : records) {
      std::optional<std::size_t> match;
      for (std::size_t c = 0; c < labels.size(); ++c) {
        if (std::find(rec.tags.begin(), rec.tags.end(), labels[c]) == rec.tags.end()) continue;
        if (match) throw Error("record '" + rec.id + "' carries more than one class label");
        match = c;
      }
      if (!match) continue;
      truth.push_back(*match);
      used.push_back(rec);
    }
    if (used.empty()) throw Error("no record carries any of the labels as a tag");
    Tensor images = encode_record_images(model, used, base, args.batch);
    TextEncoderFn encode_text = [&](const std::vector<std::string>& texts) {
      NoGradGuard no_grad;
      return model.encode_texts(texts);
    };
    Tensor prototypes = class_prototypes(templates, labels, encode_text);
    if (prototypes.dim(1) != images.dim(1))
      throw Error("embedding dims differ: images " + std::to_string(images.dim(1)) + ", text " +
                  std::to_string(prototypes.dim(1)));
    const auto predicted = nearest_prototype(images, prototypes);
    std::vector<std::size_t> count(labels.size(), 0), correct(labels.size(), 0);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < used.size(); ++i) {
      ++count[truth[i]];
      if (predicted[i] == truth[i]) ++correct[truth[i]], ++hits;
    }
    const double accuracy = static_cast<double>(hits) / static_cast<double>(used.size());
    out << fmt::format("zero-shot accuracy {:.4f} over {} records ({} classes, {} skipped)\n", accuracy, used.size(),
                       labels.size(), records.size() - used.size());
    nlohmann::json per_class = nlohmann::json::array();
    for (std::size_t c = 0; c < labels.size(); ++c)
      per_class.push_back({{"label", labels[c]}, {"count", count[c]}, {"correct", correct[c]}});
    report = {{"mode", "zeroshot"},          {"classes", labels.size()},
              {"templates", templates.size()}, {"evaluated", used.size()},
              {"skipped", records.size() - used.size()}, {"accuracy", accuracy},
              {"per_class", per_class}};
  }
  out << report.dump(2) << "\n";
  if (!args.report.empty()) write_text_file(args.report, report.dump(2) + "\n");
  return kExitOk;
}

// ---- bench ------------------------------------------------------------------------------

struct BenchArgs {
  std::vector<std::size_t> lengths = {512, 1024, 2048, 4096};
  std::size_t head_dim = 16;
  std::size_t heads = 1;
  std::size_t repeats = 3;
  std::uint64_t seed = 0;
  bool no_naive = false;
  std::string out;
  std::string plot;
};

int cmd_bench(BenchArgs args, std::ostream& out) {
  std::sort(args.lengths.begin(), args.lengths.end());
  BenchOptions options;
  options.lengths = args.lengths;
  options.head_dim = args.head_dim;
  options.heads = args.heads;
  options.repeats = args.repeats;
  options.seed = args.seed;
  options.include_naive = !args.no_naive;
  const auto rows = bench_kernel(options);

  if (args.out.empty()) {
    write_bench_csv(out, rows);
  } else {
    std::ostringstream csv;
    write_bench_csv(csv, rows);
    write_text_file(args.out, csv.str());
    out << "wrote " << rows.size() << " rows to " << args.out << "\n";
  }
  std::string plot = args.plot;
  if (plot.empty() && !args.out.empty()) plot = fs::path(args.out).replace_extension(".svg").string();
  if (!plot.empty()) {
    std::vector<PlotSeries> series;
    for (const char* kernel : {"scan", "naive"}) {
      PlotSeries s{kernel, {}, {}};
      for (const auto& r : rows) {
        if (r.kernel != kernel) continue;
        s.x.push_back(static_cast<double>(r.length));
        s.y.push_back(r.median_ns * 1e-6);
      }
      if (!s.x.empty()) series.push_back(std::move(s));
    }
    write_text_file(plot, line_plot_svg(series, {"Bi-WKV kernel time", "T", "median ms", true, true}));
  }
  const ScalingVerdict verdict = scaling_verdict(rows);
  for (const auto& line : verdict.lines) out << line << "\n";
  out << "scaling verdict: " << (verdict.passed() ? "PASS" : "FAIL") << " (scan linear: "
      << (verdict.scan_linear ? "yes" : "no") << ", naive quadratic: " << (verdict.naive_quadratic ? "yes" : "no")
      << ")\n";
  return kExitOk;
}

// ---- gradcheck ------------------------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 0;
  std::string report;
};

int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out) {
  GradSuiteOptions options;
  options.seed = args.seed;
  std::size_t failed = 0;
  nlohmann::json ops = nlohmann::json::array();
  const auto results = run_grad_suite(options, [&](const GradSuiteResult& r) {
    if (!r.report.passed) ++failed;
    out << fmt::format("{}  {:<16} {:<26} coords {:>4}  max_abs {:.2e}  max_rel {:.2e}  tol {:.0e}\n",
                       r.report.passed ? "ok  " : "FAIL", r.module, r.report.name, r.report.coordinates,
                       r.report.max_abs_err, r.report.max_rel_err, r.rel_tol);
    ops.push_back({{"module", r.module},
                   {"op", r.report.name},
                   {"coordinates", r.report.coordinates},
                   {"max_abs_err", r.report.max_abs_err},
                   {"max_rel_err", r.report.max_rel_err},
                   {"rel_tol", r.rel_tol},
                   {"passed", r.report.passed}});
  });
  out << fmt::format("{} ops checked, {} failed\n", results.size(), failed);
  if (!args.report.empty())
    write_text_file(args.report, nlohmann::json{{"ops", ops}, {"failed", failed}}.dump(2) + "\n");
  return failed == 0 ? kExitOk : kExitFailure;
}

// ---- data -----------------------------------------------------------------------------------

struct GenToyArgs {
  std::string out;
  std::size_t train = 512;
  std::size_t heldout = 128;
  std::uint64_t seed = 7;
  std::size_t canvas = 32;
  bool no_generated = false;
};

int cmd_gen_toy(const GenToyArgs& args, std::ostream& out) {
  const fs::path dir = args.out;
  ensure_writable_dir(dir / "images");
  ToyCorpus corpus = make_toy_corpus(args.train, args.heldout, args.seed, args.canvas, !args.no_generated);
  auto materialize = [&](std::vector<PairedRecord>& records) {
    for (auto& r : records) {
      const std::string rel = "images/" + r.id + ".ppm";
      write_ppm(dir / rel, render_toy(ToySpec::parse(r.image_source)));
      r.image_source = rel;
    }
  };
  materialize(corpus.train);
  materialize(corpus.heldout);
  write_jsonl(dir / "train.jsonl", corpus.train);
  write_jsonl(dir / "heldout.jsonl", corpus.heldout);
  out << fmt::format("wrote {} train and {} held-out records with images to {}\n", corpus.train.size(),
                     corpus.heldout.size(), dir.string());
  return kExitOk;
}

struct FuseArgs {
  std::string in;
  std::string out;
  bool mock = false;
  std::string url;
  std::string model = LlmRequest{}.model;
  std::size_t concurrency = 4;
  std::size_t retries = 3;
  std::size_t backoff_ms = 200;
};

int cmd_fuse(const FuseArgs& args, std::ostream& out, std::ostream& err) {
  if (args.mock == !args.url.empty()) throw UsageError("data fuse needs exactly one of --mock or --url");
  auto records = read_jsonl(fs::path(args.in));
  std::unique_ptr<ChatClient> client;
  if (args.mock) client = std::make_unique<MockChatClient>();
  else client = std::make_unique<HttpChatClient>(HttpClientOptions::from_env(args.url));
  FuseOptions options;
  options.concurrency = args.concurrency;
  options.retries = args.retries;
  options.backoff = std::chrono::milliseconds(args.backoff_ms);
  options.request_template.model = args.model;
  const FuseReport report = fuse_descriptions(records, *client, options);
  write_jsonl(fs::path(args.out), records);
  for (const auto& o : report.outcomes)
    if (!o.ok) err << "failed: " << o.id << " after " << o.retries << " retries: " << o.error << "\n";
  out << fmt::format("records {}  requests {}  succeeded {}  failed {}\n", records.size(), report.requests,
                     report.succeeded, report.failed);
  return report.failed == 0 ? kExitOk : kExitFailure;
}

struct StatsArgs {
  std::string in;
  std::string image_dir;
  std::string checkpoint;
  std::size_t bucket = 8;
  std::string report;
};

int cmd_stats(const StatsArgs& args, std::ostream& out) {
  const auto records = read_jsonl(fs::path(args.in));
  std::optional<ClipModel> model;
  EncoderPair encoders;
  const fs::path base = default_image_dir(args.in, args.image_dir);
  if (!args.checkpoint.empty()) {
    model = load_model(args.checkpoint);
    encoders.image = [&](const PairedRecord& r) {
      Tensor e = encode_record_images(*model, {r}, base, 1);
      return std::vector<double>(e.data().begin(), e.data().end());
    };
    encoders.text = [&](const std::string& text) {
      NoGradGuard no_grad;
      Tensor e = model->encode_texts({text});
      return std::vector<double>(e.data().begin(), e.data().end());
    };
  }
  const auto report = caption_stats(records, {}, args.bucket, model ? &encoders : nullptr);
  for (const auto& t : report.types) {
    out << fmt::format("{:<10} count {:>6}  mean tokens {:>7.2f}", t.type, t.count, t.mean_tokens);
    if (t.mean_similarity) out << fmt::format("  mean similarity {:.4f}", *t.mean_similarity);
    out << "\n";
  }
  const std::string json = report.to_json().dump(2);
  out << json << "\n";
  if (!args.report.empty()) write_text_file(args.report, json + "\n");
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bidirectional RWKV dual encoder: training, evaluation and data tools", "rwkv_clip"};
  app.require_subcommand(1);
  app.fallthrough(false);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a dual encoder from a JSON run config");
  train_cmd->add_option("--config", train_args.config, "Run config JSON (image, text, train, data sections)")
      ->required();
  train_cmd->add_option("--out", train_args.out, "Output directory for checkpoint.bin, metrics.csv, loss.svg")
      ->required();
  train_cmd->add_option("--seed", train_args.seed, "Overrides train.seed");
  train_cmd->add_option("--epochs", train_args.epochs, "Overrides train.epochs");
  train_cmd->add_flag("--deterministic", train_args.deterministic, "Single-threaded, reproducible run");
  train_cmd->add_flag("--quiet", train_args.quiet, "No per-epoch progress lines");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Retrieval or zero-shot evaluation of a checkpoint");
  eval_cmd->add_option("--mode", eval_args.mode, "retrieval or zeroshot")
      ->check(CLI::IsMember({"retrieval", "zeroshot"}))
      ->capture_default_str();
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "checkpoint.bin")->required();
  eval_cmd->add_option("--data", eval_args.data, "Records JSONL")->required();
  eval_cmd->add_option("--image-dir", eval_args.image_dir, "Base directory of image paths (default: JSONL dir)");
  eval_cmd->add_option("--labels", eval_args.labels, "zeroshot: one class label per line, matched against tags");
  eval_cmd->add_option("--templates", eval_args.templates, "zeroshot: one prompt per line with {label}");
  eval_cmd->add_option("--report", eval_args.report, "Also write the JSON report here");
  eval_cmd->add_option("--batch", eval_args.batch, "Encoding batch size")->capture_default_str();

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "Time the scan and naive Bi-WKV kernels over sequence lengths");
  bench_cmd->add_option("--T", bench_args.lengths, "Comma-separated sequence lengths")
      ->delimiter(',')
      ->capture_default_str();
  bench_cmd->add_option("--d", bench_args.head_dim, "Head dimension")->capture_default_str();
  bench_cmd->add_option("--heads", bench_args.heads, "Heads")->capture_default_str();
  bench_cmd->add_option("--repeats", bench_args.repeats, "Timed runs per point (median)")->capture_default_str();
  bench_cmd->add_option("--seed", bench_args.seed, "Input seed")->capture_default_str();
  bench_cmd->add_flag("--no-naive", bench_args.no_naive, "Skip the quadratic reference kernel");
  bench_cmd->add_option("--out", bench_args.out, "CSV path (default: stdout)");
  bench_cmd->add_option("--plot", bench_args.plot, "SVG path (default: CSV path with .svg)");

  GradcheckArgs gradcheck_args;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck_cmd->add_option("--seed", gradcheck_args.seed, "Seed of the random inputs")->capture_default_str();
  gradcheck_cmd->add_option("--report", gradcheck_args.report, "Also write a JSON report here");

  auto* data_cmd = app.add_subcommand("data", "Dataset tools");
  data_cmd->require_subcommand(1);

  GenToyArgs toy_args;
  auto* toy_cmd = data_cmd->add_subcommand("gen-toy", "Write the procedural toy corpus as JSONL plus PPM images");
  toy_cmd->add_option("--out", toy_args.out, "Output directory")->required();
  toy_cmd->add_option("--train", toy_args.train, "Train records")->capture_default_str();
  toy_cmd->add_option("--heldout", toy_args.heldout, "Held-out records")->capture_default_str();
  toy_cmd->add_option("--seed", toy_args.seed, "Corpus seed")->capture_default_str();
  toy_cmd->add_option("--canvas", toy_args.canvas, "Image side in pixels")->capture_default_str();
  toy_cmd->add_flag("--no-generated", toy_args.no_generated, "Leave generated_description empty");

  FuseArgs fuse_args;
  auto* fuse_cmd = data_cmd->add_subcommand("fuse", "Fill generated_description through a chat-completion endpoint");
  fuse_cmd->add_option("--in", fuse_args.in, "Input JSONL")->required();
  fuse_cmd->add_option("--out", fuse_args.out, "Output JSONL")->required();
  fuse_cmd->add_flag("--mock", fuse_args.mock, "Offline mock client, no network");
  fuse_cmd->add_option("--url", fuse_args.url, "Chat-completion endpoint (key from RWKV_CLIP_LLM_KEY)");
  fuse_cmd->add_option("--model", fuse_args.model, "Model name sent with each request")->capture_default_str();
  fuse_cmd->add_option("--concurrency", fuse_args.concurrency, "Requests in flight")->capture_default_str();
  fuse_cmd->add_option("--retries", fuse_args.retries, "Retries per record")->capture_default_str();
  fuse_cmd->add_option("--backoff-ms", fuse_args.backoff_ms, "First retry delay, doubled each time")
      ->capture_default_str();

  StatsArgs stats_args;
  auto* stats_cmd = data_cmd->add_subcommand("stats", "Token-length histograms and image-text similarity per text type");
  stats_cmd->add_option("--in", stats_args.in, "Records JSONL")->required();
  stats_cmd->add_option("--image-dir", stats_args.image_dir, "Base directory of image paths (default: JSONL dir)");
  stats_cmd->add_option("--checkpoint", stats_args.checkpoint, "Adds mean cosine similarity per text type");
  stats_cmd->add_option("--bucket", stats_args.bucket, "Histogram bucket width in tokens")->capture_default_str();
  stats_cmd->add_option("--report", stats_args.report, "Also write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_args, out);
    if (*eval_cmd) return cmd_eval(eval_args, out);
    if (*bench_cmd) return cmd_bench(bench_args, out);
    if (*gradcheck_cmd) return cmd_gradcheck(gradcheck_args, out);
    if (*toy_cmd) return cmd_gen_toy(toy_args, out);
    if (*fuse_cmd) return cmd_fuse(fuse_args, out, err);
    if (*stats_cmd) return cmd_stats(stats_args, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv = {"rwkv_clip"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace rwkv_clip::cli
