#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "../binary_io.hpp"
#include "tensor.hpp"

namespace voxcell::tc {

/// A named tensor slot owned elsewhere (parameter value or running buffer).
template <typename T>
struct StateEntry {
    std::string name;
    Tensor<T>* tensor;
};

template <typename T>
using StateDict = std::vector<StateEntry<T>>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "VXCK", u32 version, u32 count, then per tensor: u32 name length, name
// bytes, u32 rank, u32 extents, f32 values. Little-endian throughout.
template <typename T>
std::vector<char> encode_checkpoint(const StateDict<T>& state) {
    io::ByteWriter w;
    w.put_bytes("VXCK");
    w.put_u32(kCheckpointVersion);
    w.put_u32(static_cast<std::uint32_t>(state.size()));
    for (const auto& e : state) {
        w.put_u32(static_cast<std::uint32_t>(e.name.size()));
        w.put_bytes(e.name);
        w.put_u32(static_cast<std::uint32_t>(e.tensor->rank()));
        for (auto d : e.tensor->shape()) w.put_u32(static_cast<std::uint32_t>(d));
        for (auto v : e.tensor->values()) w.put_f32(static_cast<float>(v));
    }
    return w.bytes();
}

/// Fills every slot in `state` from the checkpoint; names and shapes must
/// match one-to-one.
template <typename T>
void decode_checkpoint(std::vector<char> bytes, const StateDict<T>& state) {
    io::ByteReader r(std::move(bytes));
    if (r.get_bytes(4) != "VXCK") fail(ErrorKind::MalformedFile, "not a checkpoint (bad magic)");
    if (r.get_u32() != kCheckpointVersion) fail(ErrorKind::MalformedFile, "unsupported checkpoint version");
    const std::uint32_t count = r.get_u32();

    std::unordered_map<std::string, Tensor<T>*> slots;
    for (const auto& e : state) slots[e.name] = e.tensor;
    if (count != state.size())
        fail(ErrorKind::ShapeMismatch, "checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                                           std::to_string(state.size()));
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.get_bytes(r.get_u32());
        const std::uint32_t rank = r.get_u32();
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.get_u32());
        const auto it = slots.find(name);
        if (it == slots.end()) fail(ErrorKind::ShapeMismatch, "checkpoint tensor '" + name + "' unknown to model");
        if (it->second->shape() != shape)
            fail(ErrorKind::ShapeMismatch, "checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                                               ", model expects " + shape_str(it->second->shape()));
        for (auto& v : it->second->values()) v = static_cast<T>(r.get_f32());
    }
    if (!r.at_end()) fail(ErrorKind::MalformedFile, "trailing bytes in checkpoint");
}

template <typename T>
void save_checkpoint(const std::string& path, const StateDict<T>& state) {
    io::atomic_write(path, encode_checkpoint(state));
}

template <typename T>
void load_checkpoint(const std::string& path, const StateDict<T>& state) {
    decode_checkpoint(io::read_file(path), state);
}

}  // namespace voxcell::tc
