#include "fewshot/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace fewshot {

namespace {
constexpr char kMagic[8] = {'F', 'S', 'D', 'S', '0', '0', '0', '1'};

uint32_t read_u32_le(const uint8_t* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

void write_u32_le(std::string& out, uint32_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 24) & 0xff));
}
}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::Base: return "base";
    case Split::Validation: return "validation";
    case Split::Novel: return "novel";
  }
  throw ContractError("invalid split value");
}

Split split_from_name(const std::string& name) {
  if (name == "base") return Split::Base;
  if (name == "validation") return Split::Validation;
  if (name == "novel") return Split::Novel;
  throw ConfigError("unknown split name: '" + name + "' (expected base/validation/novel)");
}

void DatasetContainer::rebuild_index() {
  const size_t C = num_classes();
  class_split.assign(C, -1);
  for (int s = 0; s < 3; ++s) {
    for (uint32_t c : split_classes[size_t(s)]) {
      if (c >= C)
        throw FormatError("split references class id " + std::to_string(c) +
                          " but only " + std::to_string(C) + " classes exist");
      if (class_split[c] != -1)
        throw FormatError("class id " + std::to_string(c) + " appears in two splits");
      class_split[c] = s;
    }
  }
  for (size_t c = 0; c < C; ++c)
    if (class_split[c] == -1)
      throw FormatError("class id " + std::to_string(c) + " is missing from the split");

  images_by_class.assign(C, {});
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= C)
      throw LabelError("image " + std::to_string(i) + " has label " +
                       std::to_string(labels[i]) + " but only " + std::to_string(C) +
                       " classes exist");
    images_by_class[labels[i]].push_back(uint32_t(i));
  }

  if (pixels.size() != num_images() * image_numel())
    throw FormatError("pixel payload holds " + std::to_string(pixels.size()) +
                      " bytes, expected " + std::to_string(num_images() * image_numel()));

  // Dense relabeling of base classes (ascending class id) for classifier heads.
  base_label_of.assign(C, -1);
  std::vector<uint32_t> base = split_classes[size_t(Split::Base)];
  std::sort(base.begin(), base.end());
  for (size_t k = 0; k < base.size(); ++k) base_label_of[base[k]] = int(k);
}

DatasetContainer load_fsds(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset file: " + path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const uint8_t* p = reinterpret_cast<const uint8_t*>(blob.data());
  const size_t size = blob.size();

  if (size < 12) throw FormatError(path + ": truncated at offset 0 (needs 12-byte preamble)");
  if (std::memcmp(p, kMagic, 8) != 0)
    throw FormatError(path + ": bad magic at offset 0 (expected FSDS0001)");
  const uint32_t header_len = read_u32_le(p + 8);
  if (12 + size_t(header_len) > size)
    throw FormatError(path + ": header of " + std::to_string(header_len) +
                      " bytes at offset 12 overruns the file");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(blob.begin() + 12, blob.begin() + 12 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": invalid header JSON at offset 12: " + e.what());
  }

  static const std::vector<std::string> kKeys = {"version",     "num_images", "channels",
                                                 "height",      "width",      "class_names",
                                                 "split"};
  for (const auto& k : kKeys)
    if (!h.contains(k)) throw FormatError(path + ": header missing key '" + k + "'");
  for (auto it = h.begin(); it != h.end(); ++it)
    if (std::find(kKeys.begin(), kKeys.end(), it.key()) == kKeys.end())
      throw FormatError(path + ": header has unknown key '" + it.key() + "'");

  if (!h["version"].is_number_integer() || h["version"].get<int>() != 1)
    throw FormatError(path + ": unsupported header version");

  DatasetContainer ds;
  try {
    ds.channels = h["channels"].get<uint32_t>();
    ds.height = h["height"].get<uint32_t>();
    ds.width = h["width"].get<uint32_t>();
    ds.class_names = h["class_names"].get<std::vector<std::string>>();
    for (const char* name : {"base", "validation", "novel"})
      if (!h["split"].contains(name))
        throw FormatError(path + ": header split missing '" + std::string(name) + "'");
    if (h["split"].size() != 3)
      throw FormatError(path + ": header split has unknown keys");
    ds.split_classes[0] = h["split"]["base"].get<std::vector<uint32_t>>();
    ds.split_classes[1] = h["split"]["validation"].get<std::vector<uint32_t>>();
    ds.split_classes[2] = h["split"]["novel"].get<std::vector<uint32_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed header field: " + e.what());
  }
  const uint64_t n = h["num_images"].get<uint64_t>();
  if (ds.channels == 0 || ds.height == 0 || ds.width == 0)
    throw FormatError(path + ": zero image dimensions in header");

  const size_t labels_off = 12 + header_len;
  const size_t pixels_off = labels_off + size_t(n) * 4;
  const size_t expect_end = pixels_off + size_t(n) * ds.image_numel();
  if (expect_end > size)
    throw FormatError(path + ": payload truncated (file ends at offset " +
                      std::to_string(size) + ", expected " + std::to_string(expect_end) + ")");
  if (expect_end < size)
    throw FormatError(path + ": " + std::to_string(size - expect_end) +
                      " trailing bytes at offset " + std::to_string(expect_end));

  ds.labels.resize(n);
  for (size_t i = 0; i < n; ++i) ds.labels[i] = read_u32_le(p + labels_off + 4 * i);
  ds.pixels.assign(p + pixels_off, p + expect_end);

  try {
    ds.rebuild_index();
  } catch (const Error& e) {
    throw FormatError(path + ": " + e.what());
  }
  return ds;
}

void save_fsds(const DatasetContainer& ds, const std::string& path) {
  // Validate before writing so we never emit a malformed file.
  DatasetContainer copy = ds;
  copy.rebuild_index();

  nlohmann::json h;
  h["version"] = 1;
  h["num_images"] = ds.num_images();
  h["channels"] = ds.channels;
  h["height"] = ds.height;
  h["width"] = ds.width;
  h["class_names"] = ds.class_names;
  h["split"]["base"] = ds.split_classes[0];
  h["split"]["validation"] = ds.split_classes[1];
  h["split"]["novel"] = ds.split_classes[2];
  const std::string header = h.dump();  // nlohmann sorts keys: deterministic bytes

  std::string out;
  out.reserve(12 + header.size() + ds.labels.size() * 4 + ds.pixels.size());
  out.append(kMagic, 8);
  write_u32_le(out, uint32_t(header.size()));
  out += header;
  for (uint32_t l : ds.labels) write_u32_le(out, l);
  out.append(reinterpret_cast<const char*>(ds.pixels.data()), ds.pixels.size());

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open dataset file for writing: " + path);
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw IoError("short write to dataset file: " + path);
}

}  // namespace fewshot
