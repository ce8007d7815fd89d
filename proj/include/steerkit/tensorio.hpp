#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerkit/errors.hpp"

namespace steerkit {

// Single-file tensor container:
//   [8-byte little-endian header length N] [N bytes UTF-8 JSON header] [raw payload]
// The header maps tensor name -> {dtype: "f32", shape: [...], data_offsets: [begin, end)}
// with offsets relative to the start of the payload. Free-form metadata lives
// under the reserved "__metadata__" key. Only f32 payloads are supported.

struct LoadedTensor {
    std::vector<std::int64_t> shape;
    std::vector<float> values;

    std::int64_t numel() const;
};

class TensorFile {
  public:
    static TensorFile read(const std::string &path);

    bool has(const std::string &name) const { return tensors_.count(name) != 0; }
    // Throws MissingTensorError when absent.
    const LoadedTensor &get(const std::string &name) const;
    // Same, plus a ShapeMismatchError unless the stored shape equals `shape`.
    const LoadedTensor &get(const std::string &name, const std::vector<std::int64_t> &shape) const;

    const nlohmann::json &metadata() const { return metadata_; }
    std::vector<std::string> names() const;

  private:
    std::map<std::string, LoadedTensor> tensors_;
    nlohmann::json metadata_ = nlohmann::json::object();
};

class TensorFileWriter {
  public:
    void set_metadata(nlohmann::json meta) { metadata_ = std::move(meta); }
    void add(const std::string &name, std::vector<std::int64_t> shape, std::span<const float> values);
    void write(const std::string &path) const;

  private:
    struct Pending {
        std::string name;
        std::vector<std::int64_t> shape;
        std::vector<float> values;
    };
    std::vector<Pending> tensors_;
    nlohmann::json metadata_ = nlohmann::json::object();
};

} // namespace steerkit
