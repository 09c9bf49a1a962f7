// Writes a deterministic synthetic image dataset for desk-scale experiments.
#include "faststamp/image_io.hpp"
#include "faststamp/synthetic.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>

using namespace faststamp;

int main(int argc, char** argv) {
  CLI::App app{"synthetic dataset generator"};
  std::string out_dir;
  int count = 64, size = 64;
  std::uint64_t seed = 100;
  std::string format = "png";
  app.add_option("--out", out_dir, "output directory")->required();
  app.add_option("--count", count, "number of images");
  app.add_option("--size", size, "square image size");
  app.add_option("--seed", seed, "generator seed");
  app.add_option("--format", format, "png or ppm");
  CLI11_PARSE(app, argc, argv);

  std::filesystem::create_directories(out_dir);
  for (int i = 0; i < count; ++i) {
    auto img = tensor_to_image(
        synthetic_image<float>(Rng::mix(seed, static_cast<std::uint64_t>(i)), size, size));
    char name[64];
    std::snprintf(name, sizeof(name), "img_%04d.%s", i, format.c_str());
    write_image((std::filesystem::path(out_dir) / name).string(), img);
  }
  std::printf("wrote %d %dx%d images to %s\n", count, size, size, out_dir.c_str());
  return 0;
}
