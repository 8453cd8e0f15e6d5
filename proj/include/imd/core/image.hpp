#pragma once

#include <cstdint>

#include "imd/core/types.hpp"

namespace imd {

/// RGB image as a [3, H, W] tensor scaled to [0, 1].
template <class T>
Tensor<T> image_to_tensor(const Image& img) {
  const int h = img.height(), w = img.width();
  Tensor<T> out({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = static_cast<T>(img.at(y, x, c)) / T(255);
  return out;
}

/// Reflect-pads the bottom/right edges so both dims are multiples of `multiple`.
/// Pixel coordinates are unchanged for the original region.
inline Image pad_to_multiple(const Image& img, int multiple = kCoarseStride) {
  const int h = img.height(), w = img.width();
  const int H = (h + multiple - 1) / multiple * multiple;
  const int W = (w + multiple - 1) / multiple * multiple;
  if (H == h && W == w) return img;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Image out(H, W, img.id);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(reflect(y, h), reflect(x, w), c);
  return out;
}

inline bool is_divisible(const Image& img, int multiple = kCoarseStride) {
  return img.height() % multiple == 0 && img.width() % multiple == 0;
}

}  // namespace imd
