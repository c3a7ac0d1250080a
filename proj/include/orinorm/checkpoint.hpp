#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "orinorm/tensor.hpp"

namespace orinorm {

/// Binary container of named double arrays.
///
/// Layout: the 8 magic bytes "ORNCKPT\0", a little-endian u64 header length,
/// a JSON header {"version", "dtype", "arrays": [{name, shape, offset,
/// count}], "meta"}, then every array's values as little-endian f64 in header
/// order. Offsets count values from the start of the data section.
struct Checkpoint {
  struct Array {
    std::string name;
    ad::Shape shape;
    std::vector<double> values;
  };

  nlohmann::json meta = nlohmann::json::object();
  std::vector<Array> arrays;

  const Array& find(const std::string& name) const;
};

inline constexpr int kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws DataError on bad magic, version mismatch, truncation or a header
/// whose shape disagrees with its value count; `source` labels messages.
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source = "checkpoint");

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace orinorm
