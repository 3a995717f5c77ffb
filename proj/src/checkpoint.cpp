#include "malm/checkpoint.hpp"

#include <torch/serialize.h>

#include "malm/common.hpp"

namespace malm {

namespace {

torch::Tensor string_to_tensor(const std::string& s) {
    torch::Tensor t = torch::empty({static_cast<int64_t>(s.size())}, torch::kUInt8);
    std::memcpy(t.data_ptr<uint8_t>(), s.data(), s.size());
    return t;
}

std::string tensor_to_string(const torch::Tensor& t) {
    torch::Tensor c = t.to(torch::kUInt8).contiguous();
    return std::string(reinterpret_cast<const char*>(c.data_ptr<uint8_t>()),
                       static_cast<size_t>(c.numel()));
}

}  // namespace

void save_checkpoint(const MalmModel& model, const RunConfig& config,
                     const Tokenizer& tokenizer, const std::string& path) {
    torch::serialize::OutputArchive archive;
    archive.write("meta/format_id", torch::tensor(kCheckpointFormatId));
    archive.write("meta/config", string_to_tensor(config.resolved_text()));
    archive.write("meta/vocab", string_to_tensor(tokenizer.serialize()));
    for (const auto& item : model->named_parameters(true))
        archive.write("param/" + item.key(), item.value().detach().cpu());
    archive.save_to(path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path);
    } catch (const std::exception& e) {
        throw Error("cannot read checkpoint " + path + ": " + e.what());
    }

    torch::Tensor format_id;
    check(archive.try_read("meta/format_id", format_id),
          "checkpoint missing format id: " + path);
    check(format_id.item<int64_t>() == kCheckpointFormatId,
          "unsupported checkpoint format id " +
              std::to_string(format_id.item<int64_t>()) + " (expected " +
              std::to_string(kCheckpointFormatId) + ")");

    torch::Tensor config_bytes, vocab_bytes;
    check(archive.try_read("meta/config", config_bytes), "checkpoint missing config");
    check(archive.try_read("meta/vocab", vocab_bytes), "checkpoint missing vocab");

    LoadedCheckpoint out;
    out.config = RunConfig::defaults();
    out.config.load_text(tensor_to_string(config_bytes), path + ":config");
    out.tokenizer = Tokenizer::deserialize(tensor_to_string(vocab_bytes));

    ModelConfig mc = ModelConfig::from_run_config(out.config, out.tokenizer.vocab_size());
    out.model = MalmModel(mc);
    torch::NoGradGuard no_grad;
    for (const auto& item : out.model->named_parameters(true)) {
        torch::Tensor value;
        check(archive.try_read("param/" + item.key(), value),
              "checkpoint missing parameter: " + item.key());
        check(value.sizes() == item.value().sizes(),
              "checkpoint parameter shape mismatch: " + item.key());
        item.value().copy_(value);
    }
    return out;
}

}  // namespace malm
