#pragma once

// Checkpoint container: a JSON header (model config, tensor directory, run
// provenance) followed by raw little-endian doubles in header order. The
// loader rebuilds the parameter structs and validates every tensor shape
// against the embedded config.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaconv/aggregator.hpp"
#include "metaconv/common.hpp"
#include "metaconv/meta.hpp"
#include "metaconv/seq_model.hpp"

namespace metaconv {

namespace ckptdetail {

constexpr char kMagic[8] = {'M', 'C', 'O', 'N', 'V', 'C', 'K', '1'};

struct NamedTensor {
    std::string name;
    const double* data;
    Eigen::Index rows, cols;
};

inline std::vector<NamedTensor> checkpoint_tensors(const TrainState& st) {
    std::vector<NamedTensor> out;
    for_each_named_tensor(st.phi, [&out](const std::string& name, const auto& t) {
        out.push_back({"phi." + name, t.data(), t.rows(), t.cols()});
    });
    out.push_back({"agg.w1", st.agg.w1.data(), st.agg.w1.rows(), st.agg.w1.cols()});
    out.push_back({"agg.w2", st.agg.w2.data(), st.agg.w2.rows(), st.agg.w2.cols()});
    out.push_back({"agg.b1", st.agg.b1.data(), st.agg.b1.rows(), st.agg.b1.cols()});
    out.push_back({"agg.b2", st.agg.b2.data(), st.agg.b2.rows(), st.agg.b2.cols()});
    out.push_back({"table.rows", st.table.rows.data(), st.table.rows.rows(),
                   st.table.rows.cols()});
    return out;
}

}  // namespace ckptdetail

struct CheckpointMeta {
    std::string dataset_hash;
    std::string config_hash;
    uint64_t seed = 0;
    long step = 0;
    json run_config;  // full producing configuration, for the record
};

inline void save_checkpoint(const std::string& path, const TrainState& st,
                            const CheckpointMeta& meta) {
    auto tensors = ckptdetail::checkpoint_tensors(st);
    json dir = json::array();
    for (const auto& t : tensors)
        dir.push_back(json{{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    json header{{"model", model_config_to_json(st.phi.config)},
                {"table_rows", st.table.size()},
                {"tensors", dir},
                {"meta",
                 {{"dataset_hash", meta.dataset_hash},
                  {"config_hash", meta.config_hash},
                  {"seed", meta.seed},
                  {"step", meta.step},
                  {"run_config", meta.run_config}}}};
    std::string head = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(ckptdetail::kMagic, sizeof(ckptdetail::kMagic));
    uint64_t len = head.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& t : tensors)
        out.write(reinterpret_cast<const char*>(t.data),
                  static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(
                                                                    t.rows * t.cols)));
    if (!out) throw DataError("short write on checkpoint: " + path);
}

struct Checkpoint {
    TrainState state;
    CheckpointMeta meta;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, ckptdetail::kMagic, sizeof(magic)) != 0)
        throw DataError("not a checkpoint file: " + path);
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string head(len, '\0');
    in.read(head.data(), static_cast<std::streamsize>(len));
    if (!in) throw DataError("truncated checkpoint header: " + path);
    json header = json::parse(head);

    Checkpoint ck;
    ModelConfig model_cfg = model_config_from_json(header.at("model"));
    ck.state.phi = ModelParameters::zeros(model_cfg);
    ck.state.agg = AggregatorParameters::zeros(model_cfg.d_model);
    int table_rows = header.at("table_rows").get<int>();
    ck.state.table.rows = Mat::Zero(table_rows, model_cfg.d_model);
    ck.state.table.valid.assign(static_cast<std::size_t>(table_rows), 1);

    const auto& meta = header.at("meta");
    ck.meta.dataset_hash = meta.at("dataset_hash").get<std::string>();
    ck.meta.config_hash = meta.at("config_hash").get<std::string>();
    ck.meta.seed = meta.at("seed").get<uint64_t>();
    ck.meta.step = meta.at("step").get<long>();
    ck.meta.run_config = meta.value("run_config", json::object());
    ck.state.run_seed = ck.meta.seed;
    ck.state.step = ck.meta.step;

    auto tensors = ckptdetail::checkpoint_tensors(ck.state);
    const auto& dir = header.at("tensors");
    if (dir.size() != tensors.size())
        throw DataError("checkpoint tensor directory does not match the config");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& entry = dir[i];
        if (entry.at("name").get<std::string>() != tensors[i].name ||
            entry.at("rows").get<Eigen::Index>() != tensors[i].rows ||
            entry.at("cols").get<Eigen::Index>() != tensors[i].cols)
            throw DataError("checkpoint shape mismatch at tensor '" + tensors[i].name +
                            "' (config expects " + std::to_string(tensors[i].rows) + "x" +
                            std::to_string(tensors[i].cols) + ")");
        in.read(reinterpret_cast<char*>(const_cast<double*>(tensors[i].data)),
                static_cast<std::streamsize>(sizeof(double) *
                                             static_cast<std::size_t>(tensors[i].rows *
                                                                      tensors[i].cols)));
        if (!in) throw DataError("truncated checkpoint payload at '" + tensors[i].name + "'");
    }
    return ck;
}

}  // namespace metaconv
