#pragma once

#include "ppd/numerics.hpp"

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace ppd {

inline constexpr char kContainerMagic[4] = {'P', 'P', 'D', 'C'};
inline constexpr std::uint32_t kContainerVersion = 1;

// Tensor container shared by model checkpoints and prompt banks:
//   "PPDC" | u32 version | u64 header length | JSON header | f32 payloads
// all little-endian. The header carries caller fields plus
// "tensors": [{name, shape: [rows, cols], offset}] with byte offsets into
// the payload.
struct Container {
    nlohmann::json header;
    std::vector<std::pair<std::string, Matrix>> tensors;

    const Matrix & tensor(const std::string & name) const;
};

void write_container(const std::string & path, const nlohmann::json & fields,
                     const std::vector<std::pair<std::string, const Matrix *>> & tensors);

Container read_container(const std::string & path);

} // namespace ppd
