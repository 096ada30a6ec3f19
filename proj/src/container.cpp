#include "ppd/container.hpp"

#include "ppd/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace ppd {

namespace {

template <typename T>
void put(std::string & out, T value) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(bytes, sizeof(T));
}

template <typename T>
T take(const std::string & in, std::size_t & offset, const std::string & path) {
    if (offset + sizeof(T) > in.size()) {
        throw FormatError(path + ": truncated header");
    }
    T value;
    std::memcpy(&value, in.data() + offset, sizeof(T));
    offset += sizeof(T);
    return value;
}

} // namespace

const Matrix & Container::tensor(const std::string & name) const {
    for (const auto & [n, m] : tensors) {
        if (n == name) {
            return m;
        }
    }
    throw FormatError("container has no tensor named '" + name + "'");
}

void write_container(const std::string & path, const nlohmann::json & fields,
                     const std::vector<std::pair<std::string, const Matrix *>> & tensors) {
    nlohmann::json header = fields;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto & [name, m] : tensors) {
        header["tensors"].push_back({{"name", name}, {"shape", {m->rows(), m->cols()}}, {"offset", offset}});
        offset += m->size() * sizeof(float);
    }
    const std::string header_text = header.dump();

    std::string blob;
    blob.append(kContainerMagic, 4);
    put<std::uint32_t>(blob, kContainerVersion);
    put<std::uint64_t>(blob, header_text.size());
    blob += header_text;
    for (const auto & [name, m] : tensors) {
        const auto data = m->data();
        blob.append(reinterpret_cast<const char *>(data.data()), data.size_bytes());
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open '" + path + "' for writing");
    }
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) {
        throw DataError("failed writing '" + path + "'");
    }
}

Container read_container(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open '" + path + "'");
    }
    const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::size_t offset = 0;
    if (blob.size() < 4 || std::memcmp(blob.data(), kContainerMagic, 4) != 0) {
        throw FormatError(path + ": bad magic");
    }
    offset = 4;
    const auto version = take<std::uint32_t>(blob, offset, path);
    if (version != kContainerVersion) {
        throw FormatError(path + ": unsupported version " + std::to_string(version));
    }
    const auto header_len = take<std::uint64_t>(blob, offset, path);
    if (offset + header_len > blob.size()) {
        throw FormatError(path + ": header runs past end of file");
    }
    Container c;
    try {
        c.header = nlohmann::json::parse(blob.begin() + static_cast<long>(offset),
                                         blob.begin() + static_cast<long>(offset + header_len));
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(path + ": malformed header: " + e.what());
    }
    offset += header_len;
    const std::size_t payload_start = offset;
    const std::size_t payload_len = blob.size() - payload_start;

    if (!c.header.contains("tensors") || !c.header["tensors"].is_array()) {
        throw FormatError(path + ": header lacks a tensor table");
    }
    std::size_t expected_end = 0;
    for (const auto & t : c.header["tensors"]) {
        try {
            const std::string name = t.at("name").get<std::string>();
            const auto rows = t.at("shape").at(0).get<std::size_t>();
            const auto cols = t.at("shape").at(1).get<std::size_t>();
            const auto off = t.at("offset").get<std::size_t>();
            const std::size_t bytes = rows * cols * sizeof(float);
            if (off + bytes > payload_len) {
                throw FormatError(path + ": tensor '" + name + "' extends past the payload");
            }
            std::vector<float> data(rows * cols);
            std::memcpy(data.data(), blob.data() + payload_start + off, bytes);
            c.tensors.emplace_back(name, Matrix(rows, cols, std::move(data)));
            expected_end = std::max(expected_end, off + bytes);
        } catch (const nlohmann::json::exception & e) {
            throw FormatError(path + ": malformed tensor entry: " + e.what());
        }
    }
    if (expected_end != payload_len) {
        throw FormatError(path + ": payload length " + std::to_string(payload_len) +
                          " disagrees with the tensor table (" + std::to_string(expected_end) + ")");
    }
    return c;
}

} // namespace ppd
