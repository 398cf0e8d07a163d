#pragma once

// Per-block warped exemplars: W * I_ref at each attention block's grid, written
// as scale{i}_block{j}.ppm (scale 0 is the finest), plus the generated image as
// output.ppm. SPADE-only blocks have no attention and produce no file.

#include <filesystem>
#include <string>
#include <vector>

#include "dynast/harness/image_io.hpp"
#include "dynast/harness/toy_data.hpp"
#include "dynast/losses.hpp"

namespace dynast {

inline std::vector<std::string> warp_viz(const Model& model, const ToySample& sample, const std::string& out_dir) {
  if (model.cfg.task != Task::supervised) throw ConfigError("warp-viz: needs a supervised-mode checkpoint");
  std::filesystem::create_directories(out_dir);
  const ModelOutput out =
      model.forward(Var::constant(sample.s_tgt), Var::constant(sample.s_ref), Var::constant(sample.i_ref));
  std::vector<std::string> written;
  for (std::size_t i = 0; i < out.blocks.size(); ++i) {
    for (std::size_t j = 0; j < out.blocks[i].size(); ++j) {
      const auto& attn = out.blocks[i][j].attn;
      if (!attn) continue;
      const Tensor ref = bilinear_resize(sample.i_ref, attn->ref_dims.h, attn->ref_dims.w);
      const Var warped = warp_reference(warp_matrix(*attn), Var::constant(ref), *attn);
      const auto path = std::filesystem::path(out_dir) / ("scale" + std::to_string(i) + "_block" + std::to_string(j) + ".ppm");
      write_pnm(path.string(), warped.value());
      written.push_back(path.string());
    }
  }
  const auto final_path = (std::filesystem::path(out_dir) / "output.ppm").string();
  write_pnm(final_path, out.image.value());
  written.push_back(final_path);
  return written;
}

}  // namespace dynast
