#include "orinorm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "orinorm/error.hpp"

namespace orinorm {

namespace {

constexpr char kMagic[8] = {'O', 'R', 'N', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

}  // namespace

const Checkpoint::Array& Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw DataError("checkpoint has no array named '" + name + "'");
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["dtype"] = "f64";
  header["meta"] = ckpt.meta;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    if (ad::shape_numel(a.shape) != a.values.size()) {
      throw std::invalid_argument("checkpoint array '" + a.name + "' has shape " +
                                  ad::shape_str(a.shape) + " but " +
                                  std::to_string(a.values.size()) + " values");
    }
    header["arrays"].push_back(
        {{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", a.values.size()}});
    offset += a.values.size();
  }
  const std::string text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset * sizeof(double));
  for (const auto& a : ckpt.arrays) {
    out.append(reinterpret_cast<const char*>(a.values.data()), a.values.size() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source) {
  auto fail = [&](const std::string& msg) -> DataError { return DataError(source + ": " + msg); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw fail(bytes.size() < 16 ? "truncated or corrupt checkpoint (missing header)"
                                 : "not a checkpoint file (bad magic)");
  }
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  if (header_len > bytes.size() - 16) {
    throw fail("truncated or corrupt checkpoint (header extends past end of file)");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (!header.contains("version") || header["version"] != kCheckpointVersion) {
    throw fail("unsupported checkpoint version " +
               (header.contains("version") ? header["version"].dump() : std::string("(none)")) +
               ", expected " + std::to_string(kCheckpointVersion));
  }
  if (header.value("dtype", "") != "f64") {
    throw fail("unsupported dtype " + header.value("dtype", std::string("(none)")));
  }
  const std::string_view data = bytes.substr(16 + header_len);
  if (data.size() % sizeof(double) != 0) {
    throw fail("truncated or corrupt checkpoint (partial value in data section)");
  }
  const std::uint64_t available = data.size() / sizeof(double);

  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  std::uint64_t expected_offset = 0;
  try {
    for (const auto& entry : header.at("arrays")) {
      Checkpoint::Array a;
      a.name = entry.at("name").get<std::string>();
      a.shape = entry.at("shape").get<ad::Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto count = entry.at("count").get<std::uint64_t>();
      if (ad::shape_numel(a.shape) != count) {
        throw fail("array '" + a.name + "' declares shape " + ad::shape_str(a.shape) + " but " +
                   std::to_string(count) + " values");
      }
      if (offset != expected_offset) {
        throw fail("array '" + a.name + "' has offset " + std::to_string(offset) + ", expected " +
                   std::to_string(expected_offset));
      }
      if (offset + count > available) {
        throw fail("truncated or corrupt checkpoint (array '" + a.name + "' extends past end of file)");
      }
      a.values.resize(count);
      std::memcpy(a.values.data(), data.data() + offset * sizeof(double), count * sizeof(double));
      expected_offset += count;
      ckpt.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (expected_offset != available) {
    throw fail("corrupt checkpoint (" + std::to_string(available - expected_offset) +
               " trailing values)");
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot write checkpoint " + path.string());
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw DataError("failed writing checkpoint " + path.string());
  }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open checkpoint " + path.string());
  }
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

}  // namespace orinorm
