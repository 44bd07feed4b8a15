#pragma once

namespace rrtl::train {

template <typename R>
ScenarioRun run_scenario_ft(Scenario scenario, const ScenarioData& data,
                            const model::ModelConfig& cfg, model::HeadKind head,
                            const TrainOpts& opts, const TransferOpts& topts, uint64_t seed,
                            const std::string& trace_dir, model::FtModel<R>* trained_out) {
    ScenarioRun run;
    TrainOpts sopts = opts;
    sopts.seed = hash64(seed, "train");
    auto trace_file = [&trace_dir](const char* stage) {
        return trace_dir.empty() ? std::string() : trace_dir + "/" + stage + ".trace.jsonl";
    };

    const bool shared_pretrain = topts.pretrain_features == PretrainFeatures::shared_only;
    const schema::EncodedBatch& pre_train =
        shared_pretrain ? data.source_train_shared : data.source_train_full;
    const schema::EncodedBatch& pre_val =
        shared_pretrain ? data.source_val_shared : data.source_val_full;

    model::FtModel<R> net(cfg, data.schema, data.vocab, head, hash64(seed, "init"));

    const schema::EncodedBatch* eval_batch = &data.target_val;
    switch (scenario) {
        case Scenario::zero_shot: {
            run.pretrain_trace = pretrain(net, pre_train, pre_val, sopts, trace_file("pretrain"));
            // no target training: target-only tokenizers are untrained, so
            // evaluation sees the shared feature view
            eval_batch = &data.target_val_shared;
            break;
        }
        case Scenario::target_baseline: {
            run.finetune_trace =
                fit(net, data.target_train, data.target_val, sopts, FreezePlan{}, 1.0,
                    trace_file("train"));
            break;
        }
        case Scenario::transfer: {
            run.pretrain_trace = pretrain(net, pre_train, pre_val, sopts, trace_file("pretrain"));
            net = model::reconfigure_for_schema(net, data.schema, data.vocab);
            run.finetune_trace = finetune(net, data.target_train, data.target_val, sopts, topts,
                                          trace_file("finetune"));
            break;
        }
    }

    const auto pred = net.predict(*eval_batch);
    run.metrics.n_eval = pred.size();
    run.metrics.r2 = metrics::r2(eval_batch->targets, pred);
    run.metrics.mae = metrics::mae(eval_batch->targets, pred);
    if (head == model::HeadKind::mdn) {
        run.val_mixtures = net.predict_mixtures(*eval_batch);
        double nll = 0.0;
        for (size_t i = 0; i < run.val_mixtures.size(); ++i) {
            nll += model::mdn_nll(run.val_mixtures[i], eval_batch->targets[i]);
        }
        run.metrics.nll = nll / static_cast<double>(run.val_mixtures.size());
    }
    if (trained_out) *trained_out = std::move(net);
    return run;
}

}  // namespace rrtl::train
