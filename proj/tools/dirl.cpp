#include <iostream>

#include "CLI11.hpp"

#include "dirl/cli.hpp"

using namespace dirl;

namespace {

void add_config_flags(CLI::App* cmd, std::filesystem::path& file, std::vector<std::string>& overrides) {
  cmd->add_option("--config", file, "Config file of key = value lines (defaults apply to missing keys)");
  cmd->add_option("--set", overrides, "Override one config key, e.g. --set optim.epochs=5 (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diversity-inducing self-supervised pretraining, MIL and attention analysis at desk scale"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(40);

  cli::GenSyntheticArgs gen;
  auto* g = app.add_subcommand("gen-synthetic", "Write a synthetic crop dataset (crops/, centroids/, manifest.csv)");
  g->add_option("--out", gen.out, "Output dataset directory")->required();
  g->add_option("--seed", gen.seed, "Master seed")->capture_default_str();
  g->add_option("--crops-per-bag", gen.crops_per_bag, "Crops per bag")->capture_default_str();
  g->add_option("--bags-per-class", gen.bags_per_class, "Bags per class")->capture_default_str();
  g->add_flag("--force", gen.force, "Overwrite a non-empty output directory");
  add_config_flags(g, gen.config, gen.overrides);

  cli::PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Self-supervised pretraining; writes checkpoints and metrics.json");
  p->add_option("--variant", pre.variant, "Objective")
      ->check(CLI::IsMember({"baseline", "cellback", "cellback-v2", "dirl"}))
      ->capture_default_str();
  p->add_option("--data", pre.data, "Dataset directory")->required();
  p->add_option("--out", pre.out, "Output run directory")->required();
  p->add_option("--seed", pre.seed, "Seed for initialization, shuffling and augmentation")->capture_default_str();
  p->add_flag("--aux-cell-count", pre.aux_cell_count, "Add the auxiliary per-token cell-count loss");
  p->add_option("--attn-scale", pre.attn_scale, "Attention logit scale: head (1/sqrt(d_head)) or model (1/sqrt(d)); default from config")
      ->check(CLI::IsMember({"head", "model"}));
  p->add_flag("--force", pre.force, "Write into a non-empty output directory");
  p->add_flag("--quiet", pre.quiet, "Suppress per-epoch progress on stderr");
  add_config_flags(p, pre.config, pre.overrides);

  cli::ExtractArgs ext;
  auto* e = app.add_subcommand("extract-features", "Mean-pooled teacher features per crop, grouped by bag (features.bin)");
  e->add_option("--ckpt", ext.ckpt, "extractor.ckpt or state.ckpt from pretrain")->required();
  e->add_option("--data", ext.data, "Dataset directory")->required();
  e->add_option("--out", ext.out, "Output directory")->required();
  e->add_flag("--force", ext.force, "Write into a non-empty output directory");

  cli::MilArgs mil;
  auto* m = app.add_subcommand("mil", "Train and evaluate the dual-stream MIL classifier over several seeds");
  m->add_option("--features", mil.features, "Feature archive from extract-features")->required();
  m->add_option("--manifest", mil.manifest, "Bag manifest whose labels replace the archive labels");
  m->add_option("--seeds", mil.seeds, "MIL seeds (space or comma separated)")->delimiter(',')->capture_default_str();
  m->add_option("--out", mil.out, "Output directory")->required();
  m->add_flag("--force", mil.force, "Write into a non-empty output directory");
  add_config_flags(m, mil.config, mil.overrides);

  cli::AnalyzeArgs an;
  auto* a = app.add_subcommand("analyze-attention", "Sparsity profile of aggregated attention plus overlays");
  a->add_option("--ckpt", an.ckpt, "Checkpoint (state.ckpt is needed for cc, bb, cb, bc)")->required();
  a->add_option("--data", an.data, "Dataset directory")->required();
  a->add_option("--out", an.out, "Output directory")->required();
  a->add_option("--which", an.which, "Map: agg|c|b|cc|bb|cb|bc")
      ->check(CLI::IsMember({"agg", "c", "b", "cc", "bb", "cb", "bc"}))
      ->capture_default_str();
  a->add_option("--layer", an.layer, "Encoder layer, 0-based; -1 means the last")->capture_default_str();
  a->add_flag("--per-head", an.per_head, "Also profile each head separately (agg only)");
  a->add_option("--max-overlays", an.max_overlays, "Overlay PNG/CSV pairs to write")->capture_default_str();
  a->add_flag("--force", an.force, "Write into a non-empty output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) {
      const SynthSummary s = cli::cmd_gen_synthetic(gen);
      std::cout << "wrote " << s.crops << " crops in " << s.bags << " bags to " << gen.out.string() << "\n";
    } else if (*p) {
      const PretrainResult r = cli::cmd_pretrain(pre);
      std::cout << r.model_id << ": " << r.state.step << " steps, final loss " << r.epochs.back().loss << "\n";
    } else if (*e) {
      const FeatureArchive ar = cli::cmd_extract_features(ext);
      std::cout << "wrote features for " << ar.bags.size() << " bags (dim " << ar.dim << ")\n";
    } else if (*m) {
      const MilReport r = cli::cmd_mil(mil);
      std::cout << "accuracy " << r.accuracy.mean << " +- " << r.accuracy.sd << ", auc " << r.auc.mean << " +- " << r.auc.sd
                << ", macro f1 " << r.f1.mean << " +- " << r.f1.sd << "\n";
    } else if (*a) {
      const cli::AnalyzeResult r = cli::cmd_analyze_attention(an);
      std::cout << "bins low " << r.profile.low << " desired " << r.profile.desired << " high " << r.profile.high << " over "
                << r.profile.count << " tokens\n";
    }
  } catch (const std::exception& ex) {
    std::cerr << "dirl: error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
