// Writes a four-class separable scene (32x32x8 cube plus labels) that
// smoke.json trains on.
//
//   make_scene [out_dir] [seed]

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "hsvlm/hsio.hpp"
#include "hsvlm/synthetic.hpp"

int main(int argc, char** argv) {
  const std::filesystem::path dir = argc > 1 ? argv[1] : ".";
  const auto seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 7ull;
  try {
    std::filesystem::create_directories(dir);
    const auto scene = hsvlm::make_separable_scene(32, 32, 8, 4, seed);
    hsvlm::save_cube(scene.cube, dir / "scene.hsc");
    hsvlm::save_labels(scene.labels, dir / "scene.hsl");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "make_scene: %s\n", e.what());
    return 2;
  }
  std::printf("wrote %s and %s\n", (dir / "scene.hsc").c_str(), (dir / "scene.hsl").c_str());
  return 0;
}
