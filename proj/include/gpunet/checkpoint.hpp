#pragma once

// Binary checkpoint: "GPUN", u32 version, u32 dtype tag, u64 tensor count,
// then per tensor u32 name length, UTF-8 name, u32 rank, u64 dims, raw
// little-endian scalars. The model configuration travels as "meta.*" tensors.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gpunet/model.hpp"

namespace gpunet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
public:
    enum class Kind { io, bad_magic, bad_version, bad_dtype, truncated, mismatch };

    CheckpointError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

enum class DType : std::uint32_t { float32 = 1, float64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::float32; }
template <>
constexpr DType dtype_of<double>() { return DType::float64; }

template <typename T>
struct NamedTensor {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<T> data;
};

template <typename T>
std::string encode_tensors(const std::vector<NamedTensor<T>>& tensors);
/// Throws CheckpointError on bad magic, version, dtype or truncation.
template <typename T>
std::vector<NamedTensor<T>> decode_tensors(const std::string& bytes);

/// Reads only the header: returns the stored dtype.
DType checkpoint_dtype(const std::filesystem::path& path);

/// Meta tensors first, then parameters and BN buffers in network order.
template <typename T>
std::vector<NamedTensor<T>> network_tensors(Network<T>& net);

template <typename T>
std::string encode_checkpoint(Network<T>& net);
template <typename T>
Network<T> decode_checkpoint(const std::string& bytes);

/// Atomic: writes a sibling temp file, then renames it over `path`.
template <typename T>
void save_checkpoint(Network<T>& net, const std::filesystem::path& path);
template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace gpunet
