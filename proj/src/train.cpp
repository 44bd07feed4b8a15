#include "rrtl/train.hpp"

#include "json.hpp"

namespace rrtl::train {

void append_trace_jsonl(const EpochRecord& rec, std::ofstream& out) {
    nlohmann::json j;
    j["epoch"] = rec.epoch;
    j["split"] = rec.split;
    j["loss"] = rec.loss;
    j["r2"] = rec.r2;
    j["mae"] = rec.mae;
    j["lr"] = rec.lr;
    j["frozen"] = rec.frozen;
    out << j.dump() << '\n';
}

ScenarioData prepare_scenario_data(const SimDataset& source, const SimDataset& target,
                                   double val_fraction, uint64_t split_seed) {
    ScenarioData d;
    auto [src_train, src_val] = schema::split_stratified(source, val_fraction,
                                                         hash64(split_seed, "source_split"));
    auto [tgt_train, tgt_val] = schema::split_stratified(target, val_fraction,
                                                         hash64(split_seed, "target_split"));

    d.schema = schema::build_schema(source.features, target.features);
    d.vocab = schema::build_vocab(src_train, tgt_train, d.schema);
    d.standardizer = schema::fit_standardizer(src_train, tgt_train, d.schema);

    const auto src_presence = d.schema.presence("source");
    const auto tgt_presence = d.schema.presence("target");
    const auto shared_presence = d.schema.shared_presence();

    d.source_train_full = schema::encode(src_train, d.schema, d.vocab, d.standardizer, src_presence);
    d.source_val_full = schema::encode(src_val, d.schema, d.vocab, d.standardizer, src_presence);
    d.source_train_shared =
        schema::encode(src_train, d.schema, d.vocab, d.standardizer, shared_presence);
    d.source_val_shared =
        schema::encode(src_val, d.schema, d.vocab, d.standardizer, shared_presence);
    d.target_train = schema::encode(tgt_train, d.schema, d.vocab, d.standardizer, tgt_presence);
    d.target_val = schema::encode(tgt_val, d.schema, d.vocab, d.standardizer, tgt_presence);
    d.target_val_shared =
        schema::encode(tgt_val, d.schema, d.vocab, d.standardizer, shared_presence);
    return d;
}

}  // namespace rrtl::train
