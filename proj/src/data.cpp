#include "proxslim/data.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "proxslim/errors.hpp"

namespace proxslim {

namespace {

constexpr char kMagic[4] = {'P', 'N', 'S', 'D'};
constexpr std::uint16_t kVersion = 1;

// Deterministic class tint in [0.4, 1.0] per channel.
double tint(std::size_t cls, std::size_t channel) {
  const double phase = static_cast<double>(cls * 7 + channel * 3);
  return 0.7 + 0.3 * std::sin(phase);
}

double pattern(std::size_t cls, double y, double x, double h, double w, double cy, double cx,
               double phase) {
  const std::size_t kind = cls % 4;
  const double coarse = 1.0 + static_cast<double>(cls / 4);
  const double two_pi = 2.0 * std::numbers::pi;
  switch (kind) {
    case 0: {
      const double r = 0.22 * std::min(h, w) * coarse;
      const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
      return 2.0 * std::exp(-d2 / (2.0 * r * r)) - 0.5;
    }
    case 1: return std::sin(two_pi * (y + phase) / (4.0 * coarse));
    case 2: return std::sin(two_pi * (x + phase) / (4.0 * coarse));
    default: {
      const double period = 2.0 * coarse;
      const auto cell = static_cast<long>(std::floor((y + phase) / period)) +
                        static_cast<long>(std::floor((x + phase) / period));
      return (cell % 2 == 0) ? 1.0 : -1.0;
    }
  }
}

void require_dims(const Dataset& d) {
  const InputShape s = d.image_shape();
  constexpr std::size_t kMax = std::numeric_limits<std::uint16_t>::max();
  if (s.channels > kMax || s.height > kMax || s.width > kMax || d.class_count > kMax ||
      d.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw IoError("dataset dimensions exceed the PNSD field widths");
  }
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.per_class < 1 || spec.channels < 1 || spec.height < 1 ||
      spec.width < 1) {
    throw ContractError("synthetic dataset needs >= 2 classes and positive counts");
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const std::size_t C = spec.channels, H = spec.height, W = spec.width;
  const std::size_t per = C * H * W;
  const std::size_t base = spec.classes * spec.per_class;
  const std::size_t copies = spec.interior_targets ? spec.classes + 1 : 1;

  std::vector<double> pixels;
  pixels.reserve(base * copies * per);
  std::vector<std::size_t> labels;
  labels.reserve(base * copies);
  std::vector<double> img(per);

  for (std::size_t n = 0; n < spec.per_class; ++n) {
    for (std::size_t cls = 0; cls < spec.classes; ++cls) {
      const double hy = static_cast<double>(H), wx = static_cast<double>(W);
      const double cy = (hy - 1) / 2 + (unit(rng) - 0.5) * 0.25 * hy;
      const double cx = (wx - 1) / 2 + (unit(rng) - 0.5) * 0.25 * wx;
      const double phase = (unit(rng) - 0.5) * 1.5;
      const double amp = 0.8 + 0.4 * unit(rng);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const double v = amp * tint(cls, c) *
                                 pattern(cls, static_cast<double>(y), static_cast<double>(x), hy,
                                         wx, cy, cx, phase) +
                             spec.noise * gauss(rng);
            img[(c * H + y) * W + x] = static_cast<double>(static_cast<float>(v));
          }
      for (std::size_t k = 0; k < copies; ++k) {
        pixels.insert(pixels.end(), img.begin(), img.end());
        labels.push_back(k < spec.classes && spec.interior_targets ? k : cls);
      }
    }
  }
  Dataset d{Tensor({labels.size(), C, H, W}, std::move(pixels)), std::move(labels), spec.classes};
  d.validate();
  return d;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  data.validate();
  require_dims(data);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const InputShape s = data.image_shape();
  out.write(kMagic, 4);
  binary::put<std::uint16_t>(out, kVersion);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(data.size()));
  binary::put<std::uint16_t>(out, static_cast<std::uint16_t>(data.class_count));
  binary::put<std::uint16_t>(out, static_cast<std::uint16_t>(s.channels));
  binary::put<std::uint16_t>(out, static_cast<std::uint16_t>(s.height));
  binary::put<std::uint16_t>(out, static_cast<std::uint16_t>(s.width));
  const std::size_t per = s.channels * s.height * s.width;
  for (std::size_t i = 0; i < data.size(); ++i) {
    binary::put<std::uint16_t>(out, static_cast<std::uint16_t>(data.labels[i]));
    for (std::size_t k = 0; k < per; ++k) {
      binary::put<float>(out, static_cast<float>(data.images[i * per + k]));
    }
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
    throw IoError("'" + path.string() + "' is not a PNSD dataset");
  }
  const auto version = binary::get<std::uint16_t>(in, "version");
  if (version != kVersion) {
    throw IoError("unsupported PNSD version " + std::to_string(version));
  }
  const auto count = binary::get<std::uint32_t>(in, "record count");
  const auto classes = binary::get<std::uint16_t>(in, "class count");
  const auto C = binary::get<std::uint16_t>(in, "channels");
  const auto H = binary::get<std::uint16_t>(in, "height");
  const auto W = binary::get<std::uint16_t>(in, "width");
  if (count == 0 || C == 0 || H == 0 || W == 0) throw IoError("PNSD header has a zero extent");
  const std::size_t per = std::size_t{C} * H * W;
  std::vector<double> pixels(std::size_t{count} * per);
  std::vector<std::size_t> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    labels[i] = binary::get<std::uint16_t>(in, "label");
    for (std::size_t k = 0; k < per; ++k) pixels[i * per + k] = binary::get<float>(in, "pixel");
  }
  Dataset d{Tensor({count, C, H, W}, std::move(pixels)), std::move(labels), classes};
  d.validate();
  return d;
}

Dataset load_csv(const std::filesystem::path& path, InputShape shape, std::size_t classes) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open CSV '" + path.string() + "'");
  const std::size_t per = shape.channels * shape.height * shape.width;
  std::vector<double> pixels;
  std::vector<std::size_t> labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ls(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError("CSV line " + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (row.size() != per + 1) {
      throw IoError("CSV line " + std::to_string(lineno) + ": expected " +
                    std::to_string(per + 1) + " fields, got " + std::to_string(row.size()));
    }
    if (row[0] < 0 || row[0] != std::floor(row[0])) {
      throw IoError("CSV line " + std::to_string(lineno) + ": label must be a class index");
    }
    labels.push_back(static_cast<std::size_t>(row[0]));
    pixels.insert(pixels.end(), row.begin() + 1, row.end());
  }
  if (labels.empty()) throw IoError("CSV '" + path.string() + "' has no records");
  Dataset d{Tensor({labels.size(), shape.channels, shape.height, shape.width}, std::move(pixels)),
            std::move(labels), classes};
  d.validate();
  return d;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t classes) {
  std::ifstream im(images, std::ios::binary);
  std::ifstream lb(labels, std::ios::binary);
  if (!im || !lb) throw IoError("cannot open IDX files");
  if (binary::get_be32(im, "image magic") != 0x00000803) throw IoError("bad IDX image magic");
  if (binary::get_be32(lb, "label magic") != 0x00000801) throw IoError("bad IDX label magic");
  const std::uint32_t n = binary::get_be32(im, "image count");
  const std::uint32_t rows = binary::get_be32(im, "rows");
  const std::uint32_t cols = binary::get_be32(im, "cols");
  if (binary::get_be32(lb, "label count") != n) throw IoError("IDX image/label counts differ");
  const std::size_t per = std::size_t{rows} * cols;
  std::vector<double> pixels(std::size_t{n} * per);
  std::vector<unsigned char> buf(per);
  for (std::size_t i = 0; i < n; ++i) {
    if (!im.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(per))) {
      throw IoError("truncated IDX image data");
    }
    for (std::size_t k = 0; k < per; ++k) pixels[i * per + k] = buf[k] / 255.0;
  }
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    char c;
    if (!lb.get(c)) throw IoError("truncated IDX label data");
    y[i] = static_cast<unsigned char>(c);
  }
  Dataset d{Tensor({n, 1, rows, cols}, std::move(pixels)), std::move(y), classes};
  d.validate();
  return d;
}

double nearest_centroid_accuracy(const Dataset& data) {
  data.validate();
  const std::size_t N = data.size(), K = data.class_count;
  const std::size_t per = data.images.size() / N;
  std::vector<double> centroid(K * per, 0.0);
  std::vector<std::size_t> count(K, 0);
  for (std::size_t i = 0; i < N; ++i) {
    ++count[data.labels[i]];
    for (std::size_t k = 0; k < per; ++k) centroid[data.labels[i] * per + k] += data.images[i * per + k];
  }
  for (std::size_t c = 0; c < K; ++c)
    for (std::size_t k = 0; k < per; ++k)
      if (count[c]) centroid[c * per + k] /= static_cast<double>(count[c]);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < K; ++c) {
      if (!count[c]) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < per; ++k) {
        const double e = data.images[i * per + k] - centroid[c * per + k];
        d += e * e;
      }
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    if (best == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(N);
}

}  // namespace proxslim
