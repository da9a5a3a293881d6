#include <cstdio>
#include <exception>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "attrdisc/error.hpp"
#include "attrdisc/parallel.hpp"
#include "attrdisc/pipeline.hpp"
#include "attrdisc/refnet.hpp"
#include "attrdisc/synth.hpp"
#include "attrdisc/text_io.hpp"

namespace {

using namespace attrdisc;

// Flag values land here; only flags the user actually passed override the
// config file (or the defaults).
struct Overrides {
  std::string config;
  std::string manifest, activations, votes, annotations, refnet, images_root, stop_words, merge_map, out;
  std::uint64_t seed = 0;
  double dedup_threshold = 0, alpha = 0, resample_fraction = 0, l2 = 0, tolerance = 0;
  std::size_t top_vocab = 0, bins = 0, prime_k = 0, max_epochs = 0, theta = 0, stride = 0, input_side = 0;
  std::size_t eval_words = 0, saliency_words = 0, saliency_images = 0, jobs = 0;
  std::string alignment;
  std::vector<std::size_t> occluder_sizes, accumulate_k;
  std::vector<double> iou_thresholds;
  std::vector<std::string> words;
  std::vector<std::pair<CLI::Option*, std::function<void(PipelineConfig&)>>> setters;
};

template <typename T>
void flag(CLI::App& app, Overrides& o, const std::string& name, T& target, const std::string& help,
          std::function<void(PipelineConfig&)> apply) {
  auto* opt = app.add_option(name, target, help);
  if constexpr (requires { target.push_back(target.front()); }) opt->delimiter(',');
  o.setters.emplace_back(opt, std::move(apply));
}

void add_pipeline_flags(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config, "JSON config file; flags override its values")->check(CLI::ExistingFile);
  flag(app, o, "--manifest", o.manifest, "corpus manifest (JSON lines)",
       [&o](PipelineConfig& c) { c.paths.manifest = o.manifest; });
  flag(app, o, "--activations", o.activations, "ACTV activation file",
       [&o](PipelineConfig& c) { c.paths.activations = o.activations; });
  flag(app, o, "--votes", o.votes, "pairwise vote CSV", [&o](PipelineConfig& c) { c.paths.votes = o.votes; });
  flag(app, o, "--annotations", o.annotations, "bounding-box annotation CSV",
       [&o](PipelineConfig& c) { c.paths.annotations = o.annotations; });
  flag(app, o, "--refnet", o.refnet, "reference network spec (JSON)",
       [&o](PipelineConfig& c) { c.paths.refnet = o.refnet; });
  flag(app, o, "--images-root", o.images_root, "base directory for image paths (default: manifest directory)",
       [&o](PipelineConfig& c) { c.paths.images_root = o.images_root; });
  flag(app, o, "--stop-words", o.stop_words, "stop-word list, one word per line",
       [&o](PipelineConfig& c) { c.paths.stop_words = o.stop_words; });
  flag(app, o, "--merge-map", o.merge_map, "word merge map (variant<TAB>canonical)",
       [&o](PipelineConfig& c) { c.paths.merge_map = o.merge_map; });
  flag(app, o, "--out", o.out, "output directory (default attrdisc-out)", [&o](PipelineConfig& c) { c.paths.out = o.out; });
  flag(app, o, "--seed", o.seed, "random seed (default 42)", [&o](PipelineConfig& c) { c.seed = o.seed; });
  flag(app, o, "--dedup-threshold", o.dedup_threshold, "cosine distance threshold (default 0.1)",
       [&o](PipelineConfig& c) { c.dedup_threshold = o.dedup_threshold; });
  flag(app, o, "--top-vocab", o.top_vocab, "vocabulary size (default 250)",
       [&o](PipelineConfig& c) { c.top_vocab = o.top_vocab; });
  flag(app, o, "--bins", o.bins, "histogram bins (default 32)", [&o](PipelineConfig& c) { c.bins = o.bins; });
  flag(app, o, "--alpha", o.alpha, "histogram smoothing per bin (default 0.5)",
       [&o](PipelineConfig& c) { c.alpha = o.alpha; });
  flag(app, o, "--prime-k", o.prime_k, "prime units per word (default 100)",
       [&o](PipelineConfig& c) { c.prime_k = o.prime_k; });
  flag(app, o, "--resample-frac", o.resample_fraction, "resampled fraction (default 0.5)",
       [&o](PipelineConfig& c) { c.resample_fraction = o.resample_fraction; });
  flag(app, o, "--l2", o.l2, "L2 regularisation (default 1.0)", [&o](PipelineConfig& c) { c.l2 = o.l2; });
  flag(app, o, "--max-epochs", o.max_epochs, "optimizer epochs (default 1000)",
       [&o](PipelineConfig& c) { c.max_epochs = o.max_epochs; });
  flag(app, o, "--tolerance", o.tolerance, "gradient tolerance (default 1e-6)",
       [&o](PipelineConfig& c) { c.tolerance = o.tolerance; });
  flag(app, o, "--theta", o.theta, "human vote threshold (default 3)", [&o](PipelineConfig& c) { c.theta = o.theta; });
  flag(app, o, "--occluder-sizes", o.occluder_sizes, "occluder sides in pixels (default 24,48,96)",
       [&o](PipelineConfig& c) { c.occluder_sizes = o.occluder_sizes; });
  flag(app, o, "--stride", o.stride, "occluder stride (default 4)", [&o](PipelineConfig& c) { c.stride = o.stride; });
  flag(app, o, "--input-side", o.input_side, "occlusion input side (default 256)",
       [&o](PipelineConfig& c) { c.input_side = o.input_side; });
  flag(app, o, "--alignment", o.alignment, "occluder alignment: center or top-left",
       [&o](PipelineConfig& c) {
         if (o.alignment == "center") c.alignment = OccluderAlignment::kCenter;
         else if (o.alignment == "top-left") c.alignment = OccluderAlignment::kTopLeft;
         else throw Error(ErrorKind::kInvalidArgument, fmt::format("unknown alignment '{}'", o.alignment));
       });
  flag(app, o, "--accumulate-k", o.accumulate_k, "accumulation sizes (default 1,8,64)",
       [&o](PipelineConfig& c) { c.accumulate_k = o.accumulate_k; });
  flag(app, o, "--eval-words", o.eval_words, "most frequent words compared with human scores (default 100)",
       [&o](PipelineConfig& c) { c.eval_words = o.eval_words; });
  flag(app, o, "--saliency-words", o.saliency_words, "most visual words mapped without --words (default 3)",
       [&o](PipelineConfig& c) { c.saliency_words = o.saliency_words; });
  flag(app, o, "--saliency-images", o.saliency_images, "test images per word (default 2)",
       [&o](PipelineConfig& c) { c.saliency_images = o.saliency_images; });
  flag(app, o, "--iou-thresholds", o.iou_thresholds, "IoU thresholds (default 0.1,...,0.9)",
       [&o](PipelineConfig& c) { c.iou_thresholds = o.iou_thresholds; });
  flag(app, o, "--words", o.words, "restrict stages to these words", [&o](PipelineConfig& c) { c.words = o.words; });
  flag(app, o, "--jobs", o.jobs, "worker threads (default: available cores)",
       [&o](PipelineConfig& c) { c.jobs = o.jobs; });
}

PipelineConfig resolve(const Overrides& o) {
  PipelineConfig c = o.config.empty() ? PipelineConfig{} : load_config(o.config);
  if (o.config.empty()) c.jobs = default_jobs();
  for (const auto& [opt, apply] : o.setters) {
    if (opt->count() > 0) apply(c);
  }
  c.validate();
  return c;
}

void print(const StageResult& r) {
  std::printf("%s: %s\n", r.stage.c_str(), r.summary.c_str());
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discover visual attribute words from weakly annotated image collections"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "attrdisc 0.1.0");

  using StageFn = StageResult (*)(const PipelineConfig&);
  const std::vector<std::tuple<std::string, std::string, StageFn>> stages{
      {"dedupe", "cluster near-duplicate listings per shop and keep one of each", cmd_dedupe},
      {"vocab", "build the candidate attribute vocabulary", cmd_vocab},
      {"partition", "split images into positives and negatives per word", cmd_partition},
      {"divergence", "score units by activation divergence and pick prime units", cmd_divergence},
      {"layers", "per-layer divergence profiles and salient words", cmd_layers},
      {"visualness", "train word classifiers and report visualness", cmd_visualness},
      {"eval-human", "human visualness from votes and its correlation with visualness", cmd_eval_human},
      {"saliency", "occlusion saliency maps for the most visual words", cmd_saliency},
      {"eval-saliency", "AP and IoU of saliency maps against annotated boxes", cmd_eval_saliency},
  };

  std::vector<Overrides> overrides(stages.size() + 2);
  std::function<int()> action;

  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& [name, help, fn] = stages[i];
    auto* sub = app.add_subcommand(name, help);
    add_pipeline_flags(*sub, overrides[i]);
    sub->callback([&, i, fn = fn] {
      action = [&, i, fn] {
        print(fn(resolve(overrides[i])));
        return 0;
      };
    });
  }

  auto* pipeline = app.add_subcommand("pipeline", "run every stage whose inputs are given");
  Overrides& po = overrides[stages.size()];
  add_pipeline_flags(*pipeline, po);
  pipeline->callback([&] {
    action = [&] {
      const PipelineConfig c = resolve(po);
      c.validate();
      for (const auto& r : run_pipeline(c)) print(r);
      return 0;
    };
  });

  auto* show = app.add_subcommand("config", "print the effective config as JSON");
  Overrides& so = overrides[stages.size() + 1];
  add_pipeline_flags(*show, so);
  show->callback([&] {
    action = [&] {
      std::fputs(serialize_config(resolve(so)).c_str(), stdout);
      return 0;
    };
  });

  auto* synth = app.add_subcommand("synth", "generate a planted synthetic corpus with reference-net activations");
  std::string synth_out = "attrdisc-synth", synth_spec, synth_net;
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::size_t> synth_images;
  std::size_t synth_jobs = default_jobs();
  synth->add_option("--out", synth_out, "output directory (default attrdisc-synth)");
  synth->add_option("--spec", synth_spec, "synthetic corpus spec (JSON); default is the standard corpus")
      ->check(CLI::ExistingFile);
  synth->add_option("--refnet", synth_net, "reference network spec (JSON); default is the small net")
      ->check(CLI::ExistingFile);
  synth->add_option("--seed", synth_seed, "seed for the corpus and the network (default 42)");
  synth->add_option("--n-images", synth_images, "number of images (default 2000)");
  synth->add_option("--jobs", synth_jobs, "worker threads (default: available cores)");
  synth->callback([&] {
    action = [&] {
      const std::uint64_t seed = synth_seed.value_or(kDefaultSeed);
      SyntheticCorpusSpec spec = synth_spec.empty() ? SyntheticCorpusSpec::standard(seed) : load_synth_spec(synth_spec);
      if (synth_seed) spec.seed = *synth_seed;
      if (synth_images) spec.n_images = *synth_images;
      RefNetSpec net = synth_net.empty() ? RefNetSpec::small(seed) : load_refnet_spec(synth_net);
      if (synth_seed) net.seed = *synth_seed;
      print(cmd_synth(spec, net, synth_out, std::max<std::size_t>(1, synth_jobs)));
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return action ? action() : 0;
  } catch (const Error& e) {
    std::fprintf(stderr, "attrdisc: %s\n", e.what());
    return e.kind() == ErrorKind::kStageDependency || e.kind() == ErrorKind::kMissingInput ? 3 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "attrdisc: error: %s\n", e.what());
    return 1;
  }
}
