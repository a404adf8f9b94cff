#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "splatfix/pipeline.hpp"

using splatfix::PipelineConfig;

int main(int argc, char** argv) {
  CLI::App app{"splat repair pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  int novel_views = -1;

  struct Stage {
    const char* name;
    const char* desc;
    std::function<void(const PipelineConfig&)> run;
  };
  const std::vector<Stage> stages = {
      {"gen-scene", "generate or copy the scene description", splatfix::stage_gen_scene},
      {"capture", "render the training and novel RGB-D captures", splatfix::stage_capture},
      {"reconstruct", "fit the splat cloud and fuse the TSDF", splatfix::stage_reconstruct},
      {"build-dataset", "render fine-tuning triplets at the captured poses",
       splatfix::stage_build_dataset},
      {"pretrain-codec", "train the latent codec on the toy-scene corpus",
       splatfix::stage_pretrain_codec},
      {"pretrain-fixer", "pretrain the conditional denoiser on degraded renders",
       splatfix::stage_pretrain_fixer},
      {"finetune-fixer", "fine-tune the denoiser on this scene's triplets",
       splatfix::stage_finetune_fixer},
      {"infer", "repair each novel view once and save the images", splatfix::stage_infer},
      {"evaluate", "recompute metrics from the saved artifacts", splatfix::stage_evaluate},
      {"report", "merge metrics into the final report and image grid", splatfix::stage_report},
  };

  for (const auto& s : stages) {
    CLI::App* cmd = app.add_subcommand(s.name, s.desc);
    cmd->add_option("--config", config_path, "pipeline config JSON file");
    cmd->add_option("--set", overrides, "override, dotted.path=value")->take_all();
  }
  CLI::App* gsfix = app.add_subcommand(
      "gsfix3d", "repair novel views, distill them back, refine over keyframes");
  gsfix->add_option("--config", config_path, "pipeline config JSON file");
  gsfix->add_option("--set", overrides, "override, dotted.path=value")->take_all();
  gsfix->add_option("--novel-views", novel_views, "cap the number of repaired novel views");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    PipelineConfig cfg = config_path.empty() ? splatfix::default_pipeline_config()
                                             : splatfix::load_pipeline_config(config_path);
    cfg = splatfix::apply_overrides(cfg, overrides);
    splatfix::validate_pipeline_config(cfg);
    if (app.got_subcommand(gsfix)) {
      splatfix::stage_gsfix3d(cfg, novel_views);
      return 0;
    }
    for (const auto& s : stages)
      if (app.got_subcommand(s.name)) {
        s.run(cfg);
        return 0;
      }
    std::cerr << "error: no subcommand selected\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
