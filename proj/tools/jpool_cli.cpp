// jpool: synthetic data, joint-pooled descriptor extraction, two-stream training and
// evaluation. Every command writes <out>/report.json.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "jpool/aggregate.hpp"
#include "jpool/classify.hpp"
#include "jpool/datakit.hpp"
#include "jpool/gradcheck.hpp"
#include "jpool/json_io.hpp"
#include "jpool/net3d/network.hpp"
#include "jpool/parallel.hpp"
#include "jpool/pipeline.hpp"
#include "jpool/seeding.hpp"
#include "jpool/twostream.hpp"
#include "jpool/version.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace jpool;

struct Options {
  std::uint64_t seed = seed_from_env().value_or(1);
  fs::path out;
  fs::path manifest;
  std::string net = "c3d-mini";
  fs::path weights;
  std::string layer = "conv5b";
  std::string scheme = "coordinate";
  int neighborhood = 1;
  std::string agg = "basic";
  std::string method = "sample";
  double alpha = 0.0;
  std::vector<double> alphas = {0.0, 0.1, 0.3, 0.5};
  bool gap = false;
  fs::path checkpoint;
  fs::path attention;
  std::optional<std::size_t> epochs;
  fs::path lr_schedule;
  bool resume = false;
  std::size_t clips_per_video = 1;
  fs::path descriptors;
  fs::path predictions;
  std::optional<double> lambda;
  // synth
  std::size_t videos = 180;
  std::size_t train = 120;
  std::size_t classes = 3;
  std::size_t joints = 4;
};

net3d::NetworkConfig load_net(const std::string& spec) {
  if (spec == "c3d-mini") return net3d::c3d_mini();
  if (spec == "c3d-full") return net3d::c3d_full();
  return net3d::read_network_config(spec);
}

ExtractOptions extract_options(const Options& o) {
  ExtractOptions e;
  e.layer = o.layer;
  e.scheme = parse_scheme(o.scheme);
  e.neighborhood = o.neighborhood;
  e.agg = parse_agg(o.agg);
  if (o.method == "bilinear") e.method = PoolMethod::kBilinear;
  else if (o.method != "sample") throw ConfigError("--method must be sample or bilinear");
  return e;
}

json extract_json(const Options& o) {
  return {{"net", o.net},
          {"weights", o.weights.string()},
          {"layer", o.layer},
          {"scheme", o.scheme},
          {"neighborhood", o.neighborhood},
          {"agg", o.agg},
          {"method", o.method}};
}

void require(const fs::path& p, const char* flag) {
  if (p.empty()) throw ConfigError(std::string(flag) + " is required");
  if (!fs::exists(p)) throw ConfigError(std::string(flag) + ": " + p.string() + " does not exist");
}

void require_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
}

/// Loads every video of a manifest, in manifest order.
std::vector<VideoSample> load_dataset(const fs::path& manifest, std::uint64_t* dataset_seed = nullptr) {
  const DatasetManifest m = read_dataset_manifest(manifest);
  if (dataset_seed) *dataset_seed = m.seed;
  std::vector<VideoSample> out(m.videos.size());
  parallel_for(m.videos.size(), [&](std::size_t i) { out[i] = load_video(m.videos[i]); });
  if (out.empty()) throw ConfigError(manifest.string() + ": no videos");
  return out;
}

std::size_t n_classes_of(const std::vector<VideoSample>& v) {
  int hi = -1;
  for (const auto& s : v) hi = std::max(hi, s.label);
  return static_cast<std::size_t>(hi + 1);
}

std::vector<VideoSample> split_of(const std::vector<VideoSample>& v, std::string_view split) {
  std::vector<VideoSample> out;
  for (const auto& s : v)
    if (s.split == split) out.push_back(s);
  return out;
}

net3d::Network extraction_net(const Options& o) {
  net3d::Network net(load_net(o.net), o.seed);
  if (!o.weights.empty()) net.load_weights(o.weights);
  return net;
}

void write_report(const Options& o, const std::string& command, const json& config, const json& seeds,
                  const json& metrics, const json& outputs = json::object()) {
  const json report{{"command", command},
                    {"version", std::string(kVersion)},
                    {"config", config},
                    {"config_hash", hex64(fnv1a64(config.dump()))},
                    {"seeds", seeds},
                    {"metrics", metrics},
                    {"outputs", outputs}};
  write_json_file(o.out / "report.json", report);
  std::cout << "report: " << (o.out / "report.json").string() << '\n';
}

// --- commands ---------------------------------------------------------------------------

int cmd_synth(const Options& o) {
  require_out(o);
  if (o.train > o.videos) throw ConfigError("--train exceeds --videos");
  SynthSpec spec;
  spec.n_videos = o.videos;
  spec.n_classes = o.classes;
  spec.n_joints = o.joints;
  spec.seed = o.seed;
  auto videos = synth_generate(spec);
  for (std::size_t i = 0; i < videos.size(); ++i) videos[i].split = i < o.train ? "train" : "test";
  write_dataset(o.out, videos, o.seed);
  std::cout << "wrote " << videos.size() << " videos to " << o.out.string() << '\n';
  const json config{{"videos", o.videos}, {"train", o.train}, {"classes", o.classes}, {"joints", o.joints}};
  write_report(o, "synth", config, {{"seed", o.seed}}, {{"videos", videos.size()}},
               {{"manifest", "manifest.json"}});
  return 0;
}

int cmd_extract(const Options& o) {
  require(o.manifest, "--manifest");
  require_out(o);
  const ExtractOptions opt = extract_options(o);
  std::uint64_t dataset_seed = 0;
  const auto videos = load_dataset(o.manifest, &dataset_seed);
  const net3d::Network net = extraction_net(o);
  const auto feats = compute_features(net, videos, opt);
  const std::uint64_t noise_seed = mix_seed(o.seed, "noise");
  json index = json::array();
  std::size_t length = 0;
  std::vector<Descriptor> ds(feats.size());
  parallel_for(feats.size(), [&](std::size_t i) {
    ds[i] = o.gap ? gap_descriptor(feats[i])
                  : jdd_descriptor(feats[i], noisy_joints(feats[i], o.alpha, noise_seed), net.config(), opt);
  });
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string file = "descriptors/" + feats[i].id + ".jpt";
    write_descriptor(o.out / file, ds[i]);
    index.push_back({{"id", feats[i].id}, {"label", feats[i].label}, {"split", feats[i].split}, {"file", file}});
    length = ds[i].values.size();
  }
  write_json_file(o.out / "descriptors.json", {{"length", length}, {"descriptors", index}});
  std::cout << "extracted " << ds.size() << " descriptors of length " << length << '\n';
  json config = extract_json(o);
  config["manifest"] = o.manifest.string();
  config["alpha"] = o.alpha;
  config["gap"] = o.gap;
  write_report(o, "extract", config,
               {{"seed", o.seed}, {"dataset_seed", dataset_seed}, {"noise_seed", noise_seed}},
               {{"count", ds.size()}, {"length", length}}, {{"index", "descriptors.json"}});
  return 0;
}

int cmd_classify(const Options& o) {
  require(o.descriptors, "--descriptors");
  require_out(o);
  const fs::path path = fs::is_directory(o.descriptors) ? o.descriptors / "descriptors.json" : o.descriptors;
  const auto index = read_json_file(path);
  const fs::path root = path.parent_path();
  std::vector<Descriptor> train, test;
  std::vector<std::string> test_ids;
  with_json_context(path, [&] {
    for (const auto& e : index.at("descriptors")) {
      Descriptor d = read_descriptor(root / e.at("file").get<std::string>());
      d.label = e.at("label").get<int>();
      const std::string split = e.at("split").get<std::string>();
      if (split == "train") {
        train.push_back(std::move(d));
      } else if (split == "test") {
        test_ids.push_back(e.at("id").get<std::string>());
        test.push_back(std::move(d));
      }
    }
  });
  if (train.empty()) throw ConfigError(path.string() + ": no train descriptors");
  int hi = -1;
  for (const auto& d : train) hi = std::max(hi, d.label);
  const std::size_t k = static_cast<std::size_t>(hi + 1);
  LinearOptions lo;
  lo.seed = o.seed;
  const std::vector<double> grid = o.lambda ? std::vector<double>{*o.lambda} : default_lambda_grid();
  const SplitResult r = train_and_test(train, test, k, lo, grid);
  std::vector<PredictionRow> rows;
  for (std::size_t i = 0; i < test.size(); ++i)
    rows.push_back({test_ids[i], test[i].label, r.test_pred[i], predict_scores(r.model, test[i].values)});
  write_predictions_csv(o.out / "predictions.csv", rows);
  save_linear(o.out / "model.jpt", r.model);
  std::printf("lambda %g  train accuracy %.6f  test accuracy %.6f\n", r.cv.lambda, r.train_accuracy,
              r.test_accuracy);
  const json config{{"descriptors", o.descriptors.string()}, {"grid", grid}, {"folds", 3}};
  write_report(o, "classify", config, {{"seed", o.seed}},
               {{"lambda", r.cv.lambda},
                {"train_accuracy", r.train_accuracy},
                {"test_accuracy", r.test_accuracy},
                {"cv_accuracy", r.cv.fold_accuracy},
                {"n_train", train.size()},
                {"n_test", test.size()}},
               {{"predictions", "predictions.csv"}, {"model", "model.jpt"}});
  return 0;
}

int cmd_eval(const Options& o) {
  require(o.predictions, "--predictions");
  const auto rows = read_predictions_csv(o.predictions);
  if (rows.empty()) throw ConfigError(o.predictions.string() + ": no rows");
  std::vector<int> pred, labels;
  std::size_t k = rows.front().scores.size();
  for (const auto& r : rows) {
    pred.push_back(r.pred);
    labels.push_back(r.label);
    k = std::max({k, static_cast<std::size_t>(r.pred + 1), static_cast<std::size_t>(r.label + 1)});
  }
  const double acc = accuracy(pred, labels);
  const Confusion c = confusion(pred, labels, k);
  std::printf("accuracy %.6f\n", acc);
  for (const auto& row : c) {
    for (std::size_t j = 0; j < row.size(); ++j) std::printf(j ? " %zu" : "%zu", row[j]);
    std::printf("\n");
  }
  if (!o.out.empty())
    write_report(o, "eval", {{"predictions", o.predictions.string()}}, {{"seed", o.seed}},
                 {{"accuracy", acc}, {"confusion", c}, {"n", rows.size()}});
  return 0;
}

int cmd_gradcheck(const Options& o) {
  std::vector<GradcheckResult> results = gradcheck::layers();
  results.push_back(gradcheck::bilinear());
  results.push_back(gradcheck::two_stream());
  bool ok = true;
  json metrics = json::object();
  for (const auto& r : results) {
    std::printf("%-12s max rel error %.3e  threshold %.0e  %s\n", r.name.c_str(), r.rel_error, r.threshold,
                r.pass() ? "PASS" : "FAIL");
    ok = ok && r.pass();
    metrics[r.name] = r.rel_error;
  }
  if (!o.out.empty()) write_report(o, "gradcheck", {{"eps", 1e-5}}, {{"seed", o.seed}}, metrics);
  return ok ? 0 : 2;
}

int cmd_noise_sweep(const Options& o) {
  require(o.manifest, "--manifest");
  require_out(o);
  const ExtractOptions opt = extract_options(o);
  std::uint64_t dataset_seed = 0;
  const auto videos = load_dataset(o.manifest, &dataset_seed);
  const net3d::Network net = extraction_net(o);
  const auto feats = compute_features(net, videos, opt);
  const std::uint64_t noise_seed = mix_seed(o.seed, "noise");
  LinearOptions lo;
  lo.seed = o.seed;
  const auto points = noise_sweep(feats, net.config(), opt, o.alphas, noise_seed, n_classes_of(videos), lo);
  fs::create_directories(o.out);
  std::ofstream csv(o.out / "noise_sweep.csv");
  csv << "alpha,accuracy\n";
  json rows = json::array();
  for (const auto& p : points) {
    char line[64];
    std::snprintf(line, sizeof line, "%g,%.10g\n", p.alpha, p.test_accuracy);
    csv << line;
    std::printf("alpha %.3f  accuracy %.6f  (train %.6f, lambda %g)\n", p.alpha, p.test_accuracy,
                p.train_accuracy, p.lambda);
    rows.push_back({{"alpha", p.alpha}, {"accuracy", p.test_accuracy}, {"train_accuracy", p.train_accuracy},
                    {"lambda", p.lambda}});
  }
  if (!csv) throw Error("write failed: " + (o.out / "noise_sweep.csv").string());
  json config = extract_json(o);
  config["manifest"] = o.manifest.string();
  config["alpha"] = o.alphas;
  write_report(o, "noise-sweep", config,
               {{"seed", o.seed}, {"dataset_seed", dataset_seed}, {"noise_seed", noise_seed}},
               {{"sweep", rows}}, {{"csv", "noise_sweep.csv"}});
  return 0;
}

std::size_t batches_per_epoch(std::size_t n, std::size_t batch) {
  return batch == 0 ? 1 : (n + batch - 1) / batch;
}

TrainOptions train_options(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  TrainOptions t;
  t.checkpoint_dir = o.checkpoint;
  t.resume = o.resume;
  return t;
}

int cmd_train_attention(const Options& o) {
  require(o.manifest, "--manifest");
  require_out(o);
  std::uint64_t dataset_seed = 0;
  const auto videos = load_dataset(o.manifest, &dataset_seed);
  const auto cfg = load_net(o.net);
  const auto train = split_of(videos, "train"), held = split_of(videos, "test");
  if (train.empty()) throw ConfigError("no videos in the train split");
  net3d::Network trunk(cfg, o.seed);
  if (!o.weights.empty()) trunk.load_weights(o.weights);
  AttentionNet net(cfg, o.layer, train.front().joints.n_joints(), mix_seed(o.seed, 1));
  net.copy_trunk(trunk);
  const auto data = attention_examples(train, cfg, o.layer, o.clips_per_video);
  const auto held_data = attention_examples(held, cfg, o.layer, o.clips_per_video);
  Schedule s = default_attention_schedule();
  if (!o.lr_schedule.empty()) s = read_schedule(o.lr_schedule);
  else if (o.epochs) s.phases[0].steps = *o.epochs * batches_per_epoch(data.size(), s.batch_size);
  s.seed = mix_seed(o.seed, "batches");
  const double before = held_data.empty() ? 0.0 : attention_eval_loss(net, held_data);
  const TrainReport rep = train_attention(net, data, s, train_options(o));
  json metrics{{"steps", rep.steps},
               {"first_loss", rep.losses.front()},
               {"final_loss", rep.losses.back()},
               {"resumed", rep.resumed}};
  if (!held_data.empty()) {
    const HitRate h = heatmap_hits(net, held_data);
    metrics["heldout_loss_before"] = before;
    metrics["heldout_loss_after"] = attention_eval_loss(net, held_data);
    metrics["heldout_within_one_cell"] = h.within_rate();
    metrics["heldout_exact_cell"] = h.exact_rate();
    std::printf("held-out loss %.6f -> %.6f  within one cell %.4f  exact %.4f\n", before,
                metrics["heldout_loss_after"].get<double>(), h.within_rate(), h.exact_rate());
  }
  std::printf("trained %zu steps, loss %.6f -> %.6f\n", rep.steps, rep.losses.front(), rep.losses.back());
  json config{{"manifest", o.manifest.string()}, {"net", o.net}, {"layer", o.layer},
              {"schedule", to_json(s)}, {"clips_per_video", o.clips_per_video}};
  write_report(o, "train-attention", config,
               {{"seed", o.seed}, {"dataset_seed", dataset_seed}, {"batch_seed", s.seed}}, metrics,
               {{"checkpoint", o.checkpoint.string()}, {"config_hash", rep.config_hash}});
  return 0;
}

/// Video-level prediction: clip probabilities averaged over the video's clips.
PredictionRow predict_video(const TwoStreamModel& m, const VideoSample& v) {
  const std::size_t len = m.feature.config().input.l;
  std::vector<double> mean(m.n_classes, 0.0);
  const auto starts = clip_starts(v.n_frames(), len, 8);
  for (std::size_t s : starts) {
    const auto p = two_stream_fwd(m, slice_frames(v.frames, s, len));
    for (std::size_t k = 0; k < p.size(); ++k) mean[k] += p[k] / static_cast<double>(starts.size());
  }
  return {v.id, v.label, argmax(mean), mean};
}

int cmd_finetune(const Options& o) {
  require(o.manifest, "--manifest");
  require_out(o);
  std::uint64_t dataset_seed = 0;
  const auto videos = load_dataset(o.manifest, &dataset_seed);
  const auto cfg = load_net(o.net);
  const auto train = split_of(videos, "train"), test = split_of(videos, "test");
  if (train.empty()) throw ConfigError("no videos in the train split");
  const std::size_t k = n_classes_of(videos);
  TwoStreamModel m = make_two_stream(cfg, o.layer, train.front().joints.n_joints(), k, o.seed);
  if (!o.weights.empty()) m.feature.load_weights(o.weights);
  if (!o.attention.empty()) {
    require(o.attention, "--attention");
    m.attention.network().load_weights(fs::exists(o.attention / "attention") ? o.attention / "attention"
                                                                               : o.attention);
  }
  const auto data = class_examples(train, cfg.input.l, o.clips_per_video);
  Schedule s = default_finetune_schedule();
  if (!o.lr_schedule.empty()) s = read_schedule(o.lr_schedule);
  else if (o.epochs) s.phases[0].steps = *o.epochs * batches_per_epoch(data.size(), s.batch_size);
  s.seed = mix_seed(o.seed, "batches");
  const TrainReport rep = finetune_two_stream(m, data, s, train_options(o));
  const double train_acc = two_stream_accuracy(m, data);
  json metrics{{"steps", rep.steps},
               {"first_loss", rep.losses.front()},
               {"final_loss", rep.losses.back()},
               {"train_clip_accuracy", train_acc},
               {"resumed", rep.resumed}};
  json outputs{{"checkpoint", o.checkpoint.string()}, {"config_hash", rep.config_hash}};
  std::printf("trained %zu steps, loss %.6f -> %.6f, train clip accuracy %.4f\n", rep.steps,
              rep.losses.front(), rep.losses.back(), train_acc);
  if (!test.empty()) {
    std::vector<PredictionRow> rows(test.size());
    parallel_for(test.size(), [&](std::size_t i) { rows[i] = predict_video(m, test[i]); });
    std::vector<int> pred, labels;
    for (const auto& r : rows) {
      pred.push_back(r.pred);
      labels.push_back(r.label);
    }
    write_predictions_csv(o.out / "predictions.csv", rows);
    metrics["test_accuracy"] = accuracy(pred, labels);
    outputs["predictions"] = "predictions.csv";
    std::printf("test video accuracy %.4f\n", metrics["test_accuracy"].get<double>());
  }
  json config{{"manifest", o.manifest.string()}, {"net", o.net}, {"layer", o.layer},
              {"attention", o.attention.string()}, {"schedule", to_json(s)},
              {"clips_per_video", o.clips_per_video}};
  write_report(o, "finetune", config,
               {{"seed", o.seed}, {"dataset_seed", dataset_seed}, {"batch_seed", s.seed}}, metrics, outputs);
  return 0;
}

// --- flag wiring ------------------------------------------------------------------------

void add_seed_out(CLI::App* c, Options& o, bool out_required = true) {
  c->add_option("--seed", o.seed, "base seed (default: JPOOL_SEED or 1)");
  auto* out = c->add_option("--out", o.out, "output directory");
  if (out_required) out->required();
}

void add_pooling(CLI::App* c, Options& o) {
  c->add_option("--manifest", o.manifest, "dataset manifest.json")->required();
  c->add_option("--net", o.net, "network config JSON, or c3d-mini / c3d-full");
  c->add_option("--weights", o.weights, "weights directory (default: random init from --seed)");
  c->add_option("--layer", o.layer, "pooled conv layer");
  c->add_option("--scheme", o.scheme, "joint mapping")->check(CLI::IsMember({"ratio", "coordinate"}));
  c->add_option("--neighborhood", o.neighborhood, "1 = point, 3 = cube max")->check(CLI::IsMember({1, 3}));
  c->add_option("--agg", o.agg, "clip aggregation")->check(CLI::IsMember({"basic", "advanced"}));
  c->add_option("--method", o.method, "sample or bilinear")->check(CLI::IsMember({"sample", "bilinear"}));
}

void add_training(CLI::App* c, Options& o) {
  c->add_option("--manifest", o.manifest, "dataset manifest.json")->required();
  c->add_option("--net", o.net, "network config JSON, or c3d-mini / c3d-full");
  c->add_option("--weights", o.weights, "feature trunk weights directory");
  c->add_option("--layer", o.layer, "joined conv layer");
  c->add_option("--checkpoint", o.checkpoint, "checkpoint directory")->required();
  c->add_flag("--resume", o.resume, "continue from the checkpoint if present");
  c->add_option("--epochs", o.epochs, "passes over the training clips (default schedule only)");
  c->add_option("--lr-schedule", o.lr_schedule, "JSON phase schedule")->check(CLI::ExistingFile);
  c->add_option("--clips-per-video", o.clips_per_video, "training clips per video (0 = all)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"jpool: joint-pooled 3D conv descriptors and two-stream bilinear models"};
  app.set_version_flag("--version", std::string(jpool::kVersion));
  app.require_subcommand(1);
  Options o;
  std::function<int()> run;

  auto* synth = app.add_subcommand("synth", "generate the synthetic moving-joints dataset");
  add_seed_out(synth, o);
  synth->add_option("--videos", o.videos, "number of videos");
  synth->add_option("--train", o.train, "first N videos form the train split");
  synth->add_option("--classes", o.classes, "number of classes");
  synth->add_option("--joints", o.joints, "joints per frame");
  synth->callback([&] { run = [&] { return cmd_synth(o); }; });

  auto* extract = app.add_subcommand("extract", "write one descriptor per video");
  add_seed_out(extract, o);
  add_pooling(extract, o);
  extract->add_option("--alpha", o.alpha, "joint noise ratio");
  extract->add_flag("--gap", o.gap, "global average pooling baseline instead of joints");
  extract->callback([&] { run = [&] { return cmd_extract(o); }; });

  auto* train_att = app.add_subcommand("train-attention", "pre-train the attention stream on joint heat maps");
  add_seed_out(train_att, o);
  add_training(train_att, o);
  train_att->callback([&] { run = [&] { return cmd_train_attention(o); }; });

  auto* finetune = app.add_subcommand("finetune", "train the two-stream model end to end");
  add_seed_out(finetune, o);
  add_training(finetune, o);
  finetune->add_option("--attention", o.attention, "pre-trained attention checkpoint or weights directory");
  finetune->callback([&] { run = [&] { return cmd_finetune(o); }; });

  auto* classify = app.add_subcommand("classify", "fit the linear classifier on extracted descriptors");
  add_seed_out(classify, o);
  classify->add_option("--descriptors", o.descriptors, "descriptors.json written by extract, or its directory")->required();
  classify->add_option("--lambda", o.lambda, "fixed L2 strength (default: cross-validated)");
  classify->callback([&] { run = [&] { return cmd_classify(o); }; });

  auto* eval = app.add_subcommand("eval", "accuracy and confusion matrix of a predictions CSV");
  add_seed_out(eval, o, false);
  eval->add_option("--predictions", o.predictions, "predictions.csv")->required();
  eval->callback([&] { run = [&] { return cmd_eval(o); }; });

  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of every backward pass");
  add_seed_out(grad, o, false);
  grad->callback([&] { run = [&] { return cmd_gradcheck(o); }; });

  auto* sweep = app.add_subcommand("noise-sweep", "JDD accuracy against joint noise");
  add_seed_out(sweep, o);
  add_pooling(sweep, o);
  sweep->add_option("--alpha,--alphas", o.alphas, "noise ratios")->expected(1, -1);
  sweep->callback([&] { run = [&] { return cmd_noise_sweep(o); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return run();
  } catch (const jpool::Error& e) {
    std::cerr << "jpool " << app.get_subcommands().front()->get_name() << ": error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "jpool " << app.get_subcommands().front()->get_name() << ": error: " << e.what() << '\n';
    return 1;
  }
}
