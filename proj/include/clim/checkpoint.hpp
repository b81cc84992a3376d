#pragma once

#include <filesystem>

#include "clim/encoder.hpp"

namespace clim {

/// Encoder checkpoint. The file is one CLIMTNSR record (n=1, H=1, W=#params,
/// C=1, f32, no labels) holding every parameter block row-major and
/// back-to-back, followed by a trailer:
///
///   "CLIMIDX1" | u32 byte length L | L bytes of UTF-8 text index
///
/// The index starts with one `encoder key=value ...` line giving the
/// dimensions (and the view side used for evaluation), then one line per block:
/// `block <name> <rows> <cols> <offset>` with offset counted in floats.
struct Checkpoint {
  ParamsD params;
  int view_side = 0;  // resolution images are rendered at before entering the encoder
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace clim
