#include "steerkit/tensorio.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace steerkit {

static_assert(std::endian::native == std::endian::little,
              "tensor container IO assumes a little-endian host");

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 256ull * 1024 * 1024;

std::int64_t shape_numel(const std::vector<std::int64_t> &shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        if (d < 0) {
            throw FormatError("negative dimension in tensor shape");
        }
        n *= d;
    }
    return n;
}

} // namespace

std::int64_t LoadedTensor::numel() const {
    return shape_numel(shape);
}

TensorFile TensorFile::read(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open tensor file: " + path);
    }

    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char *>(&header_len), sizeof(header_len));
    if (!in || header_len == 0 || header_len > kMaxHeaderBytes) {
        throw FormatError("bad header length in tensor file: " + path);
    }

    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) {
        throw FormatError("truncated header in tensor file: " + path);
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("invalid JSON header: ") + e.what());
    }
    if (!header.is_object()) {
        throw FormatError("tensor file header is not a JSON object");
    }

    std::vector<std::uint8_t> payload((std::istreambuf_iterator<char>(in)),
                                      std::istreambuf_iterator<char>());

    TensorFile tf;
    for (const auto &[name, entry] : header.items()) {
        if (name == "__metadata__") {
            tf.metadata_ = entry;
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets")) {
            throw FormatError("malformed header entry for tensor '" + name + "'");
        }
        const std::string dtype = entry["dtype"].get<std::string>();
        if (dtype != "f32") {
            throw UnsupportedDtypeError("tensor '" + name + "' has unsupported dtype '" + dtype + "'");
        }
        LoadedTensor t;
        t.shape = entry["shape"].get<std::vector<std::int64_t>>();
        const auto offsets = entry["data_offsets"].get<std::vector<std::uint64_t>>();
        if (offsets.size() != 2 || offsets[1] < offsets[0]) {
            throw FormatError("bad data_offsets for tensor '" + name + "'");
        }
        if (offsets[1] > payload.size()) {
            throw ShapeMismatchError("tensor '" + name + "' extends past end of payload");
        }
        const std::uint64_t extent = offsets[1] - offsets[0];
        const std::int64_t numel = shape_numel(t.shape);
        if (extent != static_cast<std::uint64_t>(numel) * sizeof(float)) {
            throw ShapeMismatchError("tensor '" + name + "' header shape disagrees with payload length");
        }
        t.values.resize(static_cast<std::size_t>(numel));
        std::memcpy(t.values.data(), payload.data() + offsets[0], extent);
        tf.tensors_.emplace(name, std::move(t));
    }
    return tf;
}

const LoadedTensor &TensorFile::get(const std::string &name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
        throw MissingTensorError("missing tensor '" + name + "'");
    }
    return it->second;
}

const LoadedTensor &TensorFile::get(const std::string &name,
                                    const std::vector<std::int64_t> &shape) const {
    const LoadedTensor &t = get(name);
    if (t.shape != shape) {
        std::string want, got;
        for (auto d : shape) want += std::to_string(d) + ",";
        for (auto d : t.shape) got += std::to_string(d) + ",";
        throw ShapeMismatchError("tensor '" + name + "' has shape [" + got + "] expected [" + want + "]");
    }
    return t;
}

std::vector<std::string> TensorFile::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto &[name, _] : tensors_) {
        out.push_back(name);
    }
    return out;
}

void TensorFileWriter::add(const std::string &name, std::vector<std::int64_t> shape,
                           std::span<const float> values) {
    if (name == "__metadata__") {
        throw InvalidArgumentError("'__metadata__' is a reserved header key");
    }
    const std::int64_t numel = shape_numel(shape);
    if (numel != static_cast<std::int64_t>(values.size())) {
        throw ShapeMismatchError("tensor '" + name + "' value count does not match shape");
    }
    tensors_.push_back({name, std::move(shape), std::vector<float>(values.begin(), values.end())});
}

void TensorFileWriter::write(const std::string &path) const {
    nlohmann::json header = nlohmann::json::object();
    header["__metadata__"] = metadata_;

    std::uint64_t offset = 0;
    for (const auto &t : tensors_) {
        const std::uint64_t extent = t.values.size() * sizeof(float);
        header[t.name] = {{"dtype", "f32"},
                          {"shape", t.shape},
                          {"data_offsets", {offset, offset + extent}}};
        offset += extent;
    }

    const std::string header_text = header.dump();
    const std::uint64_t header_len = header_text.size();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open for writing: " + path);
    }
    out.write(reinterpret_cast<const char *>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto &t : tensors_) {
        out.write(reinterpret_cast<const char *>(t.values.data()),
                  static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    }
    if (!out) {
        throw FormatError("write failed: " + path);
    }
}

} // namespace steerkit
