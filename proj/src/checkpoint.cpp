#include "gpunet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gpunet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'G', 'P', 'U', 'N'};

template <typename V>
void put(std::string& out, V v)
{
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    out.append(buf, sizeof(V));
}

class Reader {
public:
    explicit Reader(const std::string& b) : b_(b) {}

    template <typename V>
    V get(const char* what)
    {
        need(sizeof(V), what);
        V v;
        std::memcpy(&v, b_.data() + pos_, sizeof(V));
        pos_ += sizeof(V);
        return v;
    }

    std::string bytes(std::size_t n, const char* what)
    {
        need(n, what);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    template <typename T>
    void scalars(std::vector<T>& out, std::size_t n, const char* what)
    {
        if (n > (b_.size() - pos_) / sizeof(T))
            throw CheckpointError(CheckpointError::Kind::truncated, std::string("checkpoint truncated in ") + what);
        out.resize(n);
        std::memcpy(out.data(), b_.data() + pos_, n * sizeof(T));
        pos_ += n * sizeof(T);
    }

    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n, const char* what) const
    {
        if (b_.size() - pos_ < n)
            throw CheckpointError(CheckpointError::Kind::truncated, std::string("checkpoint truncated in ") + what);
    }

    const std::string& b_;
    std::size_t pos_ = 0;
};

DType read_header(Reader& r)
{
    std::string magic;
    try {
        magic = r.bytes(4, "magic");
    } catch (const CheckpointError&) {
        throw CheckpointError(CheckpointError::Kind::bad_magic, "not a checkpoint: file shorter than the magic");
    }
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw CheckpointError(CheckpointError::Kind::bad_magic, "not a checkpoint: bad magic");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Kind::bad_version,
                              "unsupported checkpoint version " + std::to_string(version));
    const auto tag = r.get<std::uint32_t>("dtype");
    if (tag != static_cast<std::uint32_t>(DType::float32) && tag != static_cast<std::uint32_t>(DType::float64))
        throw CheckpointError(CheckpointError::Kind::bad_dtype, "unknown checkpoint dtype tag " + std::to_string(tag));
    return static_cast<DType>(tag);
}

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw CheckpointError(CheckpointError::Kind::io, "cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::uint64_t numel(const std::vector<std::uint64_t>& dims)
{
    std::uint64_t n = 1;
    for (auto d : dims)
        n *= d;
    return n;
}

template <typename T>
std::vector<std::uint64_t> buffer_dims(const Tensor4<T>& t)
{
    const auto& s = t.shape();
    if (s.n == 1 && s.h == 1 && s.w == 1)
        return {s.c};
    return {s.n, s.c, s.h, s.w};
}

template <typename T>
NamedTensor<T> meta(const std::string& key, const std::vector<std::size_t>& values)
{
    NamedTensor<T> t{"meta." + key, {values.size()}, {}};
    for (auto v : values)
        t.data.push_back(static_cast<T>(v));
    return t;
}

template <typename T>
const NamedTensor<T>& find(const std::vector<NamedTensor<T>>& ts, const std::string& name)
{
    for (const auto& t : ts)
        if (t.name == name)
            return t;
    throw CheckpointError(CheckpointError::Kind::mismatch, "checkpoint lacks tensor " + name);
}

template <typename T>
std::size_t meta_scalar(const std::vector<NamedTensor<T>>& ts, const std::string& key)
{
    const auto& t = find(ts, "meta." + key);
    if (t.data.size() != 1)
        throw CheckpointError(CheckpointError::Kind::mismatch, "meta." + key + " must be a scalar");
    return static_cast<std::size_t>(t.data[0]);
}

template <typename T>
ModelConfig config_from(const std::vector<NamedTensor<T>>& ts)
{
    ModelConfig cfg;
    const std::size_t kind = meta_scalar(ts, "block_kind");
    if (kind > 2)
        throw CheckpointError(CheckpointError::Kind::mismatch, "unknown block kind in checkpoint");
    cfg.block_kind = static_cast<BlockKind>(kind);
    cfg.widths.clear();
    for (T v : find(ts, "meta.widths").data)
        cfg.widths.push_back(static_cast<std::size_t>(v));
    cfg.in_channels = meta_scalar(ts, "in_channels");
    cfg.out_channels = meta_scalar(ts, "out_channels");
    cfg.ratio = meta_scalar(ts, "ratio");
    cfg.primary_kernel = meta_scalar(ts, "primary_kernel");
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw CheckpointError(CheckpointError::Kind::mismatch, std::string("checkpoint config invalid: ") + e.what());
    }
    return cfg;
}

template <typename T>
void assign(const NamedTensor<T>& src, Tensor4<T>& dst, const std::vector<std::uint64_t>& expect)
{
    if (src.dims != expect)
        throw CheckpointError(CheckpointError::Kind::mismatch, "shape mismatch for " + src.name);
    std::copy(src.data.begin(), src.data.end(), dst.data());
}

}  // namespace

template <typename T>
std::string encode_tensors(const std::vector<NamedTensor<T>>& tensors)
{
    std::string out(kMagic, 4);
    put(out, kCheckpointVersion);
    put(out, static_cast<std::uint32_t>(dtype_of<T>()));
    put(out, static_cast<std::uint64_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (numel(t.dims) != t.data.size())
            throw ShapeError("tensor " + t.name + " dims disagree with its data size");
        put(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        put(out, static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims)
            put(out, d);
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(T));
    }
    return out;
}

template <typename T>
std::vector<NamedTensor<T>> decode_tensors(const std::string& bytes)
{
    Reader r(bytes);
    if (read_header(r) != dtype_of<T>())
        throw CheckpointError(CheckpointError::Kind::bad_dtype, "checkpoint dtype differs from the requested one");
    const auto count = r.get<std::uint64_t>("tensor count");
    std::vector<NamedTensor<T>> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        NamedTensor<T> t;
        t.name = r.bytes(r.get<std::uint32_t>("name length"), "name");
        const auto rank = r.get<std::uint32_t>("rank");
        if (rank > 8)
            throw CheckpointError(CheckpointError::Kind::truncated, "implausible rank for " + t.name);
        for (std::uint32_t k = 0; k < rank; ++k)
            t.dims.push_back(r.get<std::uint64_t>("dims"));
        r.scalars(t.data, numel(t.dims), "tensor data");
        out.push_back(std::move(t));
    }
    if (!r.done())
        throw CheckpointError(CheckpointError::Kind::mismatch, "trailing bytes after the last tensor");
    return out;
}

DType checkpoint_dtype(const fs::path& path)
{
    const std::string bytes = read_file(path);
    Reader r(bytes);
    return read_header(r);
}

template <typename T>
std::vector<NamedTensor<T>> network_tensors(Network<T>& net)
{
    const auto& cfg = net.config();
    std::vector<NamedTensor<T>> out{
        meta<T>("block_kind", {static_cast<std::size_t>(cfg.block_kind)}),
        meta<T>("widths", cfg.widths),
        meta<T>("in_channels", {cfg.in_channels}),
        meta<T>("out_channels", {cfg.out_channels}),
        meta<T>("ratio", {cfg.ratio}),
        meta<T>("primary_kernel", {cfg.primary_kernel}),
    };
    for (const auto& p : net.params()) {
        const auto dims = p.param->dims();
        out.push_back({p.name, {dims.begin(), dims.end()},
                       {p.param->value.data(), p.param->value.data() + p.param->value.size()}});
    }
    for (const auto& b : net.buffers())
        out.push_back({b.name, buffer_dims(*b.tensor), {b.tensor->data(), b.tensor->data() + b.tensor->size()}});
    return out;
}

template <typename T>
std::string encode_checkpoint(Network<T>& net)
{
    return encode_tensors(network_tensors(net));
}

template <typename T>
Network<T> decode_checkpoint(const std::string& bytes)
{
    const auto tensors = decode_tensors<T>(bytes);
    Network<T> net(build_model(config_from(tensors)));
    std::size_t used = 6;
    for (auto& p : net.params()) {
        const auto dims = p.param->dims();
        assign(find(tensors, p.name), p.param->value, {dims.begin(), dims.end()});
        ++used;
    }
    for (auto& b : net.buffers()) {
        assign(find(tensors, b.name), *b.tensor, buffer_dims(*b.tensor));
        ++used;
    }
    if (used != tensors.size())
        throw CheckpointError(CheckpointError::Kind::mismatch, "checkpoint holds tensors the model does not use");
    return net;
}

template <typename T>
void save_checkpoint(Network<T>& net, const fs::path& path)
{
    const std::string bytes = encode_checkpoint(net);
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw CheckpointError(CheckpointError::Kind::io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out)
            throw CheckpointError(CheckpointError::Kind::io, "write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec)
        throw CheckpointError(CheckpointError::Kind::io, "cannot move checkpoint into place: " + ec.message());
}

template <typename T>
Network<T> load_checkpoint(const fs::path& path)
{
    return decode_checkpoint<T>(read_file(path));
}

#define GPUNET_INSTANTIATE_CHECKPOINT(T)                                                  \
    template std::string encode_tensors(const std::vector<NamedTensor<T>>&);            \
    template std::vector<NamedTensor<T>> decode_tensors<T>(const std::string&);          \
    template std::vector<NamedTensor<T>> network_tensors(Network<T>&);                   \
    template std::string encode_checkpoint(Network<T>&);                                 \
    template Network<T> decode_checkpoint<T>(const std::string&);                        \
    template void save_checkpoint(Network<T>&, const fs::path&);                          \
    template Network<T> load_checkpoint<T>(const fs::path&);

GPUNET_INSTANTIATE_CHECKPOINT(float)
GPUNET_INSTANTIATE_CHECKPOINT(double)

}  // namespace gpunet
