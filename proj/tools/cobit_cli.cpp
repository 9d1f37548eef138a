// cobit: train, evaluate and sample the toy model.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <malloc.h>

#include "cobit/cobit.hpp"
#include "cobit/grad_suite.hpp"

using namespace cobit;

namespace {

RunConfig config_from(const std::string& path, const std::vector<std::string>& sets) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void print_step(const StepRecord& r, double elapsed) {
  auto f = [](const std::optional<double>& v) { return v ? *v : std::nan(""); };
  std::printf("step %llu  combined %.4f  con %.4f  i2t %.4f  t2i %.4f  lr %.2e  %.0fs\n",
              static_cast<unsigned long long>(r.step), r.combined, f(r.con), f(r.i2t), f(r.t2i), r.lr, elapsed);
  std::fflush(stdout);
}

/// Trains to total_steps (or --stop-at), writing metrics.csv and checkpoint.cbit into `out`.
int run_training(Trainer& tr, const std::string& out, bool append, std::uint64_t stop_at, std::uint64_t every,
                 std::size_t log_every) {
  std::filesystem::create_directories(out);
  const std::string ckpt = out + "/checkpoint.cbit";
  MetricsLog log(out + "/metrics.csv", append);
  const auto t0 = std::chrono::steady_clock::now();
  tr.run(stop_at, [&](const StepRecord& r) {
    log.write(r);
    if (log_every && r.step % log_every == 0) print_step(r, seconds_since(t0));
    if (every && r.step % every == 0) tr.save(ckpt);
  });
  tr.save(ckpt);
  std::printf("saved %s at step %llu\n", ckpt.c_str(), static_cast<unsigned long long>(tr.steps_done()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Step-sized tensors are allocated and freed every step; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);

  CLI::App app{"CoBIT toy pre-training: contrastive, image-to-text and text-to-image over shared unicoders"};
  app.require_subcommand(1);

  std::string config, resume, out = "run", ckpt, prompt, image, disable;
  std::vector<std::string> sets;
  std::uint64_t stop_at = 0, every = 500;
  std::size_t log_every = 100, samples = 16, top_k = 64, n = 256, gc_samples = 64;
  double alpha = 2.0, h = 1e-4;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "train from a config, optionally resuming a checkpoint");
  train->add_option("--config", config, "config file (key = value lines)")->check(CLI::ExistingFile);
  train->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_option("--set", sets, "config override key=value (repeatable)");
  train->add_option("--out", out, "output directory for metrics.csv and checkpoint.cbit");
  train->add_option("--stop-at", stop_at, "stop after this many updates (default: total_steps)");
  train->add_option("--checkpoint-every", every, "checkpoint interval in steps (0: only at the end)");
  train->add_option("--log-every", log_every, "progress line interval in steps");

  auto* eval = app.add_subcommand("eval", "held-out evaluation of a checkpoint");
  eval->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--set", sets, "eval override key=value (eval_* keys)");

  auto* gen = app.add_subcommand("generate", "sample images for a caption");
  gen->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  gen->add_option("--prompt", prompt, "caption")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--samples", samples, "number of samples");
  gen->add_option("--alpha", alpha, "guidance scale");
  gen->add_option("--top-k", top_k, "top-k for image tokens");
  gen->add_option("--seed", seed, "sampling seed");

  auto* cap = app.add_subcommand("caption", "greedy caption for a PPM image");
  cap->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  cap->add_option("--image", image, "P6 image")->required()->check(CLI::ExistingFile);

  auto* cls = app.add_subcommand("classify", "zero-shot (color, shape) class for a PPM image");
  cls->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  cls->add_option("--image", image, "P6 image")->required()->check(CLI::ExistingFile);

  auto* ret = app.add_subcommand("retrieve", "image-text retrieval recall on held-out pairs");
  ret->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  ret->add_option("--n", n, "number of pairs")->check(CLI::PositiveNumber);

  auto* abl = app.add_subcommand("ablate", "train with one loss disabled and check its exclusive gradients");
  abl->add_option("--config", config, "config file")->check(CLI::ExistingFile);
  abl->add_option("--disable", disable, "loss to disable")->required()->check(CLI::IsMember({"con", "i2t", "t2i"}));
  abl->add_option("--set", sets, "config override key=value (repeatable)");
  abl->add_option("--out", out, "output directory");
  abl->add_option("--log-every", log_every, "progress line interval in steps");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and the combined loss");
  gc->add_option("--step", h, "finite-difference step h");
  gc->add_option("--samples", gc_samples, "coordinates per case");

  auto* mk = app.add_subcommand("make-codebook", "train the patch codebook and write it");
  mk->add_option("--out", out, "codebook file")->required();
  mk->add_option("--config", config, "config file")->check(CLI::ExistingFile);
  mk->add_option("--set", sets, "config override key=value (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) {
      if (!resume.empty()) {
        Trainer tr(read_checkpoint(resume));
        if (!config.empty() || !sets.empty()) {
          const RunConfig want = config_from(config, sets);
          if (config_text(want) != config_text(tr.config()))
            throw Error("config given with --resume differs from the checkpoint's config");
        }
        return run_training(tr, out, true, stop_at ? stop_at : tr.config().schedule.total, every, log_every);
      }
      Trainer tr(config_from(config, sets));
      std::printf("parameters %zu, codebook mse %.3g\n", tr.model().params().parameter_count(), tr.world().codebook_mse);
      return run_training(tr, out, false, stop_at ? stop_at : tr.config().schedule.total, every, log_every);
    }
    if (*eval) {
      LoadedModel lm = load_model(ckpt);
      RunConfig cfg = lm.config;
      for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || kv.rfind("eval_", 0) != 0) throw Error("--set for eval takes eval_*=value");
        set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
      }
      std::printf("%s\n", format_metrics(evaluate(*lm.model, lm.world, cfg)).c_str());
      return 0;
    }
    if (*gen) {
      LoadedModel lm = load_model(ckpt);
      SamplerConfig s{top_k, samples, seed, alpha};
      auto imgs = generate_image(*lm.model, lm.world.vocab, lm.world.codebook, prompt, s);
      std::filesystem::create_directories(out);
      std::vector<const RawImage*> ptrs;
      for (std::size_t i = 0; i < imgs.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "/sample_%02zu.ppm", i);
        write_ppm(imgs[i].image, out + name);
        ptrs.push_back(&imgs[i].image);
      }
      const std::size_t best = rerank_images(*lm.model, lm.world.vocab, prompt, ptrs);
      write_ppm(imgs[best].image, out + "/best.ppm");
      const auto [shape, color] = classify_rendering(imgs[best].image);
      std::printf("best sample %zu looks like: %s %s\n", best, name(color), name(shape));
      return 0;
    }
    if (*cap) {
      LoadedModel lm = load_model(ckpt);
      std::printf("%s\n", generate_caption(*lm.model, lm.world.vocab, read_ppm(image)).c_str());
      return 0;
    }
    if (*cls) {
      LoadedModel lm = load_model(ckpt);
      const auto classes = shape_color_classes();
      std::printf("%s\n", classes[zero_shot_classify(*lm.model, lm.world.vocab, read_ppm(image), classes,
                                                     PromptTemplateSet{})].c_str());
      return 0;
    }
    if (*ret) {
      LoadedModel lm = load_model(ckpt);
      const Dataset d = heldout_set(lm.world, lm.config, n);
      const auto [i2t, t2i] = eval_retrieval(*lm.model, lm.world, d, n);
      std::printf("image->text recall@1 %.4f recall@5 %.4f\ntext->image recall@1 %.4f recall@5 %.4f\n",
                  i2t.recall_at(1), i2t.recall_at(5), t2i.recall_at(1), t2i.recall_at(5));
      return 0;
    }
    if (*abl) {
      RunConfig cfg = config_from(config, sets);
      const LossKind k = parse_loss_kind(disable);
      disable_loss(cfg, k);
      Trainer tr(cfg);
      const auto names = exclusive_parameters(tr.model(), k);
      std::size_t nonzero = 0;
      tr.grad_hook = [&](const ParameterStore<float>& p) {
        for (const auto& nm : names)
          for (float g : p.get(nm).grad()) nonzero += g != 0.f;
      };
      run_training(tr, out, false, cfg.schedule.total, 0, log_every);
      std::printf("%s disabled: %zu exclusive tensors, %zu non-zero gradient entries over %llu steps\n",
                  disable.c_str(), names.size(), nonzero, static_cast<unsigned long long>(tr.steps_done()));
      return nonzero == 0 ? 0 : 1;
    }
    if (*gc) {
      const auto t0 = std::chrono::steady_clock::now();
      bool ok = true;
      for (const auto& c : run_grad_suite(h, gc_samples)) {
        const bool pass = c.result.max_rel_error < 1e-3;
        ok = ok && pass;
        std::printf("%-24s %s  max rel err %.3e over %zu coords (worst %s)\n", c.name.c_str(), pass ? "ok  " : "FAIL",
                    c.result.max_rel_error, c.result.checked, c.result.worst.c_str());
      }
      std::printf("gradcheck %s in %.1fs\n", ok ? "passed" : "FAILED", seconds_since(t0));
      return ok ? 0 : 1;
    }
    if (*mk) {
      const RunConfig cfg = config_from(config, sets);
      const World w = make_world(cfg);
      save_codebook(w.codebook, out);
      std::printf("codebook K=%zu dim=%zu mse %.3g -> %s\n", w.codebook.entries, w.codebook.dim, w.codebook_mse,
                  out.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
