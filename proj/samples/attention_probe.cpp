// Builds the attentional correlation filter by hand for one feature map and
// prints where the attention peaks relative to the object box.

#include <cstdio>

#include "lcanet/lcanet.hpp"

int main() {
  using namespace lcanet;
  Rng rng(3, 0);
  // 8-channel 32x32 feature with a brighter square at rows 16-24, columns 8-16.
  Tensor feature = random_normal<float>({1, 8, 32, 32}, rng, 0.1f);
  Tensor coarse({1, 1, 32, 32});
  for (int c = 0; c < 8; ++c)
    for (int y = 16; y < 25; ++y)
      for (int x = 8; x < 17; ++x) feature.at(0, c, y, x) += 1.0f;
  for (int y = 16; y < 25; ++y)
    for (int x = 8; x < 17; ++x) coarse.at(0, 0, y, x) = 0.9f;

  NoGradGuard guard;
  const BBox box = binarize_bbox(coarse, 0.5).front();
  std::printf("box rows %d..%d cols %d..%d\n", box.y_min, box.y_max, box.x_min, box.x_max);
  const LocalKernel<float> kernel = extract_local_kernel(feature, box, 0.5, 5);
  const Tensor att = sigmoid(correlation_map(feature, kernel));

  int best_y = 0, best_x = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      if (att.at(0, 0, y, x) > att.at(0, 0, best_y, best_x)) best_y = y, best_x = x;
  std::printf("attention peak at (%d, %d), value %.4f\n", best_y, best_x, att.at(0, 0, best_y, best_x));
  std::printf("background value at (2, 2): %.4f\n", att.at(0, 0, 2, 2));
  return 0;
}
