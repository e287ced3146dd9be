#include "histocase/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "histocase/error.hpp"

namespace histocase::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'H', 'C', 'N', 'E', 'T', 'C', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) fail(ErrorKind::CheckpointFormat, "truncated checkpoint");
    return v;
}

std::vector<ConstTensorRef> all_tensors(const Parameters& p) {
    auto t = trainable_tensors(p);
    auto r = running_tensors(p);
    t.insert(t.end(), r.begin(), r.end());
    return t;
}

std::vector<TensorRef> all_tensors(Parameters& p) {
    auto t = trainable_tensors(p);
    auto r = running_tensors(p);
    t.insert(t.end(), r.begin(), r.end());
    return t;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    check_shapes(ck.config, ck.params);
    nlohmann::json header;
    header["config"] = ck.config;
    header["metadata"] = ck.metadata;
    header["has_velocity"] = ck.velocity.has_value();
    nlohmann::json names = nlohmann::json::array();
    for (const auto& t : all_tensors(ck.params)) names.push_back({{"name", t.name}, {"size", t.data->size()}});
    header["tensors"] = names;
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::UnreadablePath, "cannot write " + path.string());
    out.write(kMagic, sizeof kMagic);
    put(out, kVersion);
    put(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    auto dump = [&out](const std::vector<ConstTensorRef>& tensors) {
        for (const auto& t : tensors)
            out.write(reinterpret_cast<const char*>(t.data->data()),
                      static_cast<std::streamsize>(t.data->size() * sizeof(double)));
    };
    dump(all_tensors(ck.params));
    if (ck.velocity) dump(trainable_tensors(*ck.velocity));
    if (!out) fail(ErrorKind::UnreadablePath, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::UnreadablePath, path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        fail(ErrorKind::CheckpointFormat, path.string() + " is not a checkpoint");
    if (const auto version = get<std::uint32_t>(in); version != kVersion)
        fail(ErrorKind::CheckpointFormat, "unsupported checkpoint version " + std::to_string(version));
    const auto length = get<std::uint64_t>(in);
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    if (!in) fail(ErrorKind::CheckpointFormat, "truncated header");

    Checkpoint ck;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
        ck.config = header.at("config").get<NetworkConfig>();
        ck.metadata = header.value("metadata", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::CheckpointFormat, e.what());
    }
    ck.params = init_parameters(ck.config, 0);
    auto tensors = all_tensors(ck.params);
    const auto& listed = header.at("tensors");
    if (listed.size() != tensors.size()) fail(ErrorKind::CheckpointFormat, "tensor count mismatch");
    auto load = [&in](const std::vector<TensorRef>& refs) {
        for (const auto& t : refs) {
            in.read(reinterpret_cast<char*>(t.data->data()), static_cast<std::streamsize>(t.data->size() * sizeof(double)));
            if (!in) fail(ErrorKind::CheckpointFormat, "truncated tensor " + t.name);
        }
    };
    for (std::size_t i = 0; i < tensors.size(); ++i)
        if (listed[i].at("name").get<std::string>() != tensors[i].name ||
            listed[i].at("size").get<std::size_t>() != tensors[i].data->size())
            fail(ErrorKind::CheckpointFormat, "tensor layout mismatch at " + tensors[i].name);
    load(tensors);
    if (header.value("has_velocity", false)) {
        ck.velocity = zeros_like(ck.params);
        load(trainable_tensors(*ck.velocity));
    }
    return ck;
}

}  // namespace histocase::model
