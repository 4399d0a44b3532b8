#include "xmed/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "xmed/error.hpp"
#include "xmed/image.hpp"
#include "xmed/parallel.hpp"

namespace xmed {
namespace fs = std::filesystem;

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (const auto& s : samples) counts.at(static_cast<std::size_t>(s.label))++;
  return counts;
}

std::size_t default_positive_class(const std::vector<std::string>& class_names) {
  if (class_names.empty()) return 0;
  return static_cast<std::size_t>(std::max_element(class_names.begin(), class_names.end()) - class_names.begin());
}

LoadResult load_dataset(const fs::path& root, ImageShape image_size) {
  if (!fs::is_directory(root)) throw ConfigError("dataset root " + root.string() + " is not a directory");
  LoadResult result;
  Dataset& ds = result.dataset;
  ds.image_shape = image_size;

  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw ConfigError("dataset root " + root.string() + " contains no class folders");

  struct Pending {
    fs::path path;
    int label;
  };
  std::vector<Pending> pending;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    ds.class_names.push_back(class_dirs[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
      if (!entry.is_regular_file()) continue;
      std::string ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (ext == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) result.warnings.push_back("class folder " + class_dirs[c].string() + " has no PNG images");
    for (auto& f : files) pending.push_back({std::move(f), static_cast<int>(c)});
  }

  std::vector<Sample> samples(pending.size());
  std::vector<std::string> errors(pending.size());
  parallel_for(pending.size(), [&](std::size_t i) {
    try {
      const Image8 img = read_png(pending[i].path);
      Tensor t = resize_bilinear(image_to_tensor(img, image_size.c), image_size.h, image_size.w);
      samples[i] = Sample{pending[i].path.string(), std::move(t), pending[i].label, std::nullopt};
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  std::string failed;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) failed += "\n  " + pending[i].path.string() + ": " + errors[i];
  }
  if (!failed.empty()) throw IoError("undecodable images:" + failed);

  ds.samples = std::move(samples);
  ds.positive_class = default_positive_class(ds.class_names);
  return result;
}

Splits split_dataset(const Dataset& dataset, const SplitSpec& spec) {
  if (dataset.empty()) throw ConfigError("cannot split an empty dataset");
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 || std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  Splits out;
  for (Dataset* part : {&out.train, &out.val, &out.test}) {
    part->class_names = dataset.class_names;
    part->image_shape = dataset.image_shape;
    part->positive_class = dataset.positive_class;
  }

  for (std::size_t c = 0; c < dataset.class_names.size(); ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
      if (dataset.samples[i].label == static_cast<int>(c)) members.push_back(i);
    }
    if (members.empty()) continue;
    if (members.size() < 3) {
      throw ConfigError("class '" + dataset.class_names[c] + "' has " + std::to_string(members.size()) +
                        " samples; at least 3 are needed to populate every split");
    }
    std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      return dataset.samples[a].source < dataset.samples[b].source;
    });
    std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + c);
    std::shuffle(members.begin(), members.end(), rng);

    const auto n = static_cast<double>(members.size());
    // The epsilon keeps e.g. 0.7 * 10 from flooring to 6.
    const auto n_train = static_cast<std::size_t>(std::floor(spec.train * n + 1e-9));
    const auto n_val = static_cast<std::size_t>(std::floor(spec.val * n + 1e-9));
    for (std::size_t k = 0; k < members.size(); ++k) {
      Dataset& dst = k < n_train ? out.train : (k < n_train + n_val ? out.val : out.test);
      dst.samples.push_back(dataset.samples[members[k]]);
    }
  }
  return out;
}

Dataset generate_synthetic(std::size_t n, ImageShape size, std::uint64_t seed, const SyntheticSpec& spec) {
  if (size.h < 16 || size.w < 16) throw ConfigError("synthetic images must be at least 16x16");
  Dataset ds;
  ds.class_names = {"lesion", "normal"};
  ds.positive_class = 0;
  ds.image_shape = size;
  ds.samples.resize(n);

  const double side = static_cast<double>(std::min(size.h, size.w));
  parallel_for(n, [&](std::size_t i) {
    std::mt19937_64 rng(seed ^ (0xD1B54A32D192ED03ULL * (i + 1)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(spec.background_mean, spec.background_std);
    // Alternate classes so any prefix of the dataset is balanced.
    const bool lesion = i % 2 == 0;
    const std::size_t idx = i / 2;

    Sample& s = ds.samples[i];
    s.image = Tensor({1, size.c, size.h, size.w});
    s.label = lesion ? 0 : 1;
    for (auto& v : s.image.values()) v = static_cast<float>(noise(rng));

    if (lesion) {
      const double sigma = side * (spec.min_sigma_frac + (spec.max_sigma_frac - spec.min_sigma_frac) * unit(rng));
      const double amplitude = spec.min_amplitude + (spec.max_amplitude - spec.min_amplitude) * unit(rng);
      const auto half = static_cast<std::size_t>(std::ceil(spec.box_sigmas * sigma));
      auto centre = [&](std::size_t len) {
        const std::size_t lo = half;
        const std::size_t hi = len - 1 - half;
        return lo + static_cast<std::size_t>(unit(rng) * static_cast<double>(hi - lo + 1));
      };
      const std::size_t cx = std::min(centre(size.w), size.w - 1 - half);
      const std::size_t cy = std::min(centre(size.h), size.h - 1 - half);
      s.lesion_box = BoundingBox{cx - half, cy - half, cx + half + 1, cy + half + 1};
      for (std::size_t c = 0; c < size.c; ++c) {
        for (std::size_t y = 0; y < size.h; ++y) {
          for (std::size_t x = 0; x < size.w; ++x) {
            const double ddx = static_cast<double>(x) - static_cast<double>(cx);
            const double ddy = static_cast<double>(y) - static_cast<double>(cy);
            s.image(0, c, y, x) +=
                static_cast<float>(amplitude * std::exp(-(ddx * ddx + ddy * ddy) / (2 * sigma * sigma)));
          }
        }
      }
    }
    for (auto& v : s.image.values()) v = std::clamp(std::round(v), 0.0f, 255.0f);

    char name[64];
    std::snprintf(name, sizeof name, "%s/%06zu", lesion ? "lesion" : "normal", idx);
    s.source = name;
  });
  return ds;
}

}  // namespace xmed
