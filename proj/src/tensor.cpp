#include "nwlab/tensor.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace nwlab {

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

constexpr char kMagic[4] = {'N', 'W', 'T', '1'};

template <typename T>
uint8_t dtype_tag();
template <>
uint8_t dtype_tag<float>() { return 1; }
template <>
uint8_t dtype_tag<double>() { return 2; }

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("tensor blob truncated while reading u32");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

} // namespace

template <typename T>
void write_tensor(std::ostream& os, const TensorT<T>& t) {
    os.write(kMagic, 4);
    uint8_t tag = dtype_tag<T>();
    uint8_t rank = static_cast<uint8_t>(t.rank());
    os.write(reinterpret_cast<const char*>(&tag), 1);
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (int i = 0; i < t.rank(); ++i) write_u32(os, static_cast<uint32_t>(t.extent(i)));
    // values are stored little-endian; this code targets little-endian hosts
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

template <typename T>
TensorT<T> read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad tensor blob: missing NWT1 magic");
    uint8_t tag = 0, rank = 0;
    is.read(reinterpret_cast<char*>(&tag), 1);
    is.read(reinterpret_cast<char*>(&rank), 1);
    if (!is) throw std::runtime_error("tensor blob truncated in header");
    if (tag != dtype_tag<T>())
        throw std::runtime_error("tensor dtype tag " + std::to_string(tag) +
                                 " does not match requested element type");
    std::vector<int> shape(rank);
    for (int i = 0; i < rank; ++i) shape[i] = static_cast<int>(read_u32(is));
    TensorT<T> t(shape);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
    if (!is) throw std::runtime_error("tensor blob truncated in payload");
    return t;
}

template <typename T>
void save_manifest(const std::string& path,
                   const std::vector<std::pair<std::string, const TensorT<T>*>>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_u32(os, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, tensor] : entries) {
        uint16_t len = static_cast<uint16_t>(name.size());
        unsigned char b[2] = {static_cast<unsigned char>(len & 0xff),
                              static_cast<unsigned char>(len >> 8)};
        os.write(reinterpret_cast<const char*>(b), 2);
        os.write(name.data(), len);
        write_tensor(os, *tensor);
    }
    if (!os) throw std::runtime_error("write failure on " + path);
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>>> load_manifest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    uint32_t count = read_u32(is);
    std::vector<std::pair<std::string, TensorT<T>>> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        unsigned char b[2];
        is.read(reinterpret_cast<char*>(b), 2);
        if (!is) throw std::runtime_error("manifest truncated in " + path);
        uint16_t len = static_cast<uint16_t>(b[0]) | (static_cast<uint16_t>(b[1]) << 8);
        std::string name(len, '\0');
        is.read(name.data(), len);
        out.emplace_back(std::move(name), read_tensor<T>(is));
    }
    return out;
}

template void write_tensor<float>(std::ostream&, const TensorT<float>&);
template void write_tensor<double>(std::ostream&, const TensorT<double>&);
template TensorT<float> read_tensor<float>(std::istream&);
template TensorT<double> read_tensor<double>(std::istream&);
template void save_manifest<float>(const std::string&,
                                   const std::vector<std::pair<std::string, const TensorT<float>*>>&);
template void save_manifest<double>(const std::string&,
                                    const std::vector<std::pair<std::string, const TensorT<double>*>>&);
template std::vector<std::pair<std::string, TensorT<float>>> load_manifest<float>(const std::string&);
template std::vector<std::pair<std::string, TensorT<double>>> load_manifest<double>(const std::string&);

} // namespace nwlab
