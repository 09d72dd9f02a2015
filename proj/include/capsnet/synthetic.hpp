#pragma once

#include "capsnet/data.hpp"

namespace capsnet {

// Procedurally rendered seven-segment-style glyphs with per-sample jitter
// (translation, stroke intensity, additive noise). Ten distinct shapes; for
// class_count > 10 the glyph repeats mod 10, which is fine for cost and
// timing benchmarks (labels still span the full class range).
Dataset make_glyph_dataset(int n, int class_count, int h, int w, uint64_t seed);

// Two-class sanity set: a bright blob in the upper-left (class 0) or
// lower-right (class 1), plus noise. Linearly separable; any working
// training loop fits it.
Dataset make_blob_dataset(int n, int h, int w, uint64_t seed);

}  // namespace capsnet
