#include "capsnet/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace capsnet {

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

uint32_t read_u32_be(std::istream& in, const std::string& path, int64_t& offset) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (in.gcount() != 4)
    throw DataError(path + ": truncated at offset " + std::to_string(offset));
  offset += 4;
  return (uint32_t(buf[0]) << 24) | (uint32_t(buf[1]) << 16) | (uint32_t(buf[2]) << 8) |
         uint32_t(buf[3]);
}

void write_u32_be(std::ostream& out, uint32_t v) {
  unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(buf), 4);
}

std::vector<unsigned char> read_bytes(std::istream& in, size_t n, const std::string& path,
                                      int64_t& offset) {
  std::vector<unsigned char> bytes(n);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n)
    throw DataError(path + ": truncated at offset " +
                    std::to_string(offset + in.gcount()));
  offset += static_cast<int64_t>(n);
  return bytes;
}

}  // namespace

Tensor Dataset::gather_images(const std::vector<int>& idx) const {
  const int64_t px = static_cast<int64_t>(height()) * width();
  Tensor out({static_cast<int>(idx.size()), 1, height(), width()});
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(out.ptr() + static_cast<int64_t>(i) * px,
                images.ptr() + static_cast<int64_t>(idx[i]) * px,
                sizeof(real) * static_cast<size_t>(px));
  return out;
}

std::vector<int> Dataset::gather_labels(const std::vector<int>& idx) const {
  std::vector<int> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = labels[static_cast<size_t>(idx[i])];
  return out;
}

uint64_t Dataset::fingerprint() const {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  mix(images.ptr(), sizeof(real) * static_cast<size_t>(images.size()));
  mix(labels.data(), sizeof(int) * labels.size());
  mix(&class_count, sizeof(class_count));
  return h;
}

void Dataset::validate() const {
  if (static_cast<int>(labels.size()) != size())
    throw DataError("dataset has " + std::to_string(size()) + " images but " +
                    std::to_string(labels.size()) + " labels");
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= class_count)
      throw DataError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                      " outside [0," + std::to_string(class_count) + ")");
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw DataError("cannot open " + images_path);
  int64_t off = 0;
  const uint32_t magic = read_u32_be(img, images_path, off);
  if (magic != kImagesMagic) {
    std::ostringstream os;
    os << images_path << ": unexpected magic 0x" << std::hex << magic << " at offset 0";
    throw DataError(os.str());
  }
  const uint32_t count = read_u32_be(img, images_path, off);
  const uint32_t rows = read_u32_be(img, images_path, off);
  const uint32_t cols = read_u32_be(img, images_path, off);
  const size_t px = static_cast<size_t>(rows) * cols;
  std::vector<unsigned char> pixels = read_bytes(img, px * count, images_path, off);

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError("cannot open " + labels_path);
  int64_t loff = 0;
  const uint32_t lmagic = read_u32_be(lab, labels_path, loff);
  if (lmagic != kLabelsMagic) {
    std::ostringstream os;
    os << labels_path << ": unexpected magic 0x" << std::hex << lmagic << " at offset 0";
    throw DataError(os.str());
  }
  const uint32_t lcount = read_u32_be(lab, labels_path, loff);
  if (lcount != count)
    throw DataError(labels_path + ": " + std::to_string(lcount) + " labels for " +
                    std::to_string(count) + " images in " + images_path);
  std::vector<unsigned char> raw_labels = read_bytes(lab, lcount, labels_path, loff);

  Dataset ds;
  ds.images = Tensor({static_cast<int>(count), 1, static_cast<int>(rows),
                      static_cast<int>(cols)});
  for (size_t i = 0; i < pixels.size(); ++i)
    ds.images.ptr()[i] = static_cast<real>(pixels[i]) / real(255);
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  int max_label = 0;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.class_count = max_label + 1;
  return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path) {
  for (int l : ds.labels)
    if (l < 0 || l > 255)
      throw DataError("label " + std::to_string(l) + " does not fit the IDX ubyte format");
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw DataError("cannot write " + images_path);
  write_u32_be(img, kImagesMagic);
  write_u32_be(img, static_cast<uint32_t>(ds.size()));
  write_u32_be(img, static_cast<uint32_t>(ds.height()));
  write_u32_be(img, static_cast<uint32_t>(ds.width()));
  std::vector<unsigned char> bytes(static_cast<size_t>(ds.images.size()));
  for (int64_t i = 0; i < ds.images.size(); ++i) {
    const real v = std::clamp(ds.images.ptr()[i], real(0), real(1));
    bytes[static_cast<size_t>(i)] = static_cast<unsigned char>(std::lround(v * real(255)));
  }
  img.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));

  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError("cannot write " + labels_path);
  write_u32_be(lab, kLabelsMagic);
  write_u32_be(lab, static_cast<uint32_t>(ds.labels.size()));
  for (int l : ds.labels) {
    const unsigned char b = static_cast<unsigned char>(l);
    lab.write(reinterpret_cast<const char*>(&b), 1);
  }
}

// ---------------------------------------------------------------------------
// PGM corpora
// ---------------------------------------------------------------------------

namespace {

struct PgmImage {
  int h = 0, w = 0;
  std::vector<unsigned char> pixels;
};

PgmImage load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  auto next_token = [&in, &path]() {
    std::string tok;
    while (in) {
      const int c = in.get();
      if (c == '#') {  // comment to end of line
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) return tok;
        continue;
      }
      if (c == EOF) break;
      tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw DataError(path + ": truncated PGM header");
    return tok;
  };
  if (next_token() != "P5") throw DataError(path + ": not a binary PGM (P5) file");
  PgmImage img;
  img.w = std::stoi(next_token());
  img.h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (img.w < 1 || img.h < 1 || maxval < 1 || maxval > 255)
    throw DataError(path + ": unsupported PGM geometry or maxval " + std::to_string(maxval));
  img.pixels.resize(static_cast<size_t>(img.w) * img.h);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<size_t>(in.gcount()) != img.pixels.size())
    throw DataError(path + ": truncated PGM payload");
  if (maxval != 255)
    for (auto& p : img.pixels)
      p = static_cast<unsigned char>(static_cast<int>(p) * 255 / maxval);
  return img;
}

// center-pad (or center-crop) to the target size
void place_padded(const PgmImage& img, real* dst, int th, int tw) {
  std::fill(dst, dst + static_cast<int64_t>(th) * tw, real(0));
  const int copy_h = std::min(img.h, th), copy_w = std::min(img.w, tw);
  const int src_y = (img.h - copy_h) / 2, src_x = (img.w - copy_w) / 2;
  const int dst_y = (th - copy_h) / 2, dst_x = (tw - copy_w) / 2;
  for (int y = 0; y < copy_h; ++y)
    for (int x = 0; x < copy_w; ++x)
      dst[static_cast<int64_t>(dst_y + y) * tw + dst_x + x] =
          static_cast<real>(img.pixels[static_cast<size_t>(src_y + y) * img.w + src_x + x]) /
          real(255);
}

void place_resized(const PgmImage& img, real* dst, int th, int tw) {
  for (int y = 0; y < th; ++y) {
    const double sy = th > 1 ? static_cast<double>(y) * (img.h - 1) / (th - 1) : 0.0;
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < tw; ++x) {
      const double sx = tw > 1 ? static_cast<double>(x) * (img.w - 1) / (tw - 1) : 0.0;
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, img.w - 1);
      const double fx = sx - x0;
      const double p00 = img.pixels[static_cast<size_t>(y0) * img.w + x0];
      const double p01 = img.pixels[static_cast<size_t>(y0) * img.w + x1];
      const double p10 = img.pixels[static_cast<size_t>(y1) * img.w + x0];
      const double p11 = img.pixels[static_cast<size_t>(y1) * img.w + x1];
      const double v = (1 - fy) * ((1 - fx) * p00 + fx * p01) + fy * ((1 - fx) * p10 + fx * p11);
      dst[static_cast<int64_t>(y) * tw + x] = static_cast<real>(v / 255.0);
    }
  }
}

}  // namespace

Dataset load_image_dir(const std::string& root, const std::string& manifest_name, int target_h,
                       int target_w, const std::string& resize_policy) {
  if (resize_policy != "pad" && resize_policy != "resize")
    throw ConfigError("resize_policy must be 'pad' or 'resize', got '" + resize_policy + "'");
  const std::filesystem::path root_path(root);
  const std::filesystem::path manifest = root_path / manifest_name;
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest " + manifest.string());

  std::vector<std::string> files;
  std::vector<int> labels;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const size_t comma = line.rfind(',');
    if (comma == std::string::npos)
      throw DataError(manifest.string() + ":" + std::to_string(line_no) +
                      ": expected `relative_path,label`");
    const std::string label_text = line.substr(comma + 1);
    int label = 0;
    try {
      size_t used = 0;
      label = std::stoi(label_text, &used);
      if (used != label_text.size()) throw std::invalid_argument(label_text);
    } catch (const std::exception&) {
      throw DataError(manifest.string() + ":" + std::to_string(line_no) +
                      ": label '" + label_text + "' is not an integer");
    }
    if (label < 0)
      throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": negative label");
    files.push_back((root_path / line.substr(0, comma)).string());
    labels.push_back(label);
  }
  if (files.empty()) throw DataError(manifest.string() + ": no entries");

  Dataset ds;
  ds.images = Tensor({static_cast<int>(files.size()), 1, target_h, target_w});
  const int64_t px = static_cast<int64_t>(target_h) * target_w;
  for (size_t i = 0; i < files.size(); ++i) {
    const PgmImage img = load_pgm(files[i]);
    real* dst = ds.images.ptr() + static_cast<int64_t>(i) * px;
    if (resize_policy == "pad")
      place_padded(img, dst, target_h, target_w);
    else
      place_resized(img, dst, target_h, target_w);
  }
  ds.labels = std::move(labels);
  ds.class_count = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  return ds;
}

// ---------------------------------------------------------------------------
// splitting and batching
// ---------------------------------------------------------------------------

namespace {

Dataset take(const Dataset& ds, const std::vector<int>& idx, const std::string& tag) {
  Dataset out;
  out.images = ds.gather_images(idx);
  out.labels = ds.gather_labels(idx);
  out.class_count = ds.class_count;
  out.split_tag = tag;
  return out;
}

}  // namespace

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_ratio, uint64_t seed) {
  if (!(train_ratio > 0 && train_ratio < 1))
    throw ConfigError("split ratio must be in (0,1), got " + std::to_string(train_ratio));
  std::vector<std::vector<int>> by_class(static_cast<size_t>(ds.class_count));
  for (int i = 0; i < ds.size(); ++i)
    by_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);

  Rng rng(seed);
  std::vector<int> train_idx, test_idx;
  for (int c = 0; c < ds.class_count; ++c) {
    auto& idx = by_class[static_cast<size_t>(c)];
    rng.shuffle(idx);
    const size_t n_train =
        static_cast<size_t>(std::floor(train_ratio * static_cast<double>(idx.size()) + 0.5));
    for (size_t i = 0; i < idx.size(); ++i)
      (i < n_train ? train_idx : test_idx).push_back(idx[i]);
    if (!idx.empty() && (n_train == 0 || n_train == idx.size()))
      std::cerr << "warning: class " << c << " has an empty "
                << (n_train == 0 ? "train" : "test") << " side after the split\n";
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {take(ds, train_idx, "train"), take(ds, test_idx, "test")};
}

std::vector<int> epoch_permutation(int n, uint64_t seed, int epoch) {
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(seed + 0x9E3779B97F4A7C15ull * (static_cast<uint64_t>(epoch) + 1));
  rng.shuffle(order);
  return order;
}

BatchIterator::BatchIterator(const Dataset& ds, int batch_size, uint64_t seed, int epoch)
    : ds_(ds), order_(epoch_permutation(ds.size(), seed, epoch)), batch_size_(batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
}

bool BatchIterator::next(Tensor& images, std::vector<int>& labels) {
  if (cursor_ >= order_.size()) return false;
  const size_t end = std::min(cursor_ + static_cast<size_t>(batch_size_), order_.size());
  std::vector<int> idx(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                       order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  images = ds_.gather_images(idx);
  labels = ds_.gather_labels(idx);
  return true;
}

}  // namespace capsnet
