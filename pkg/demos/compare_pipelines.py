"""Score the three pipelines on a few random splits of one synthetic dive set.

Run with ``python demos/compare_pipelines.py``; takes a few minutes on one CPU.
"""

from aqa import evalkit
from aqa.pipelines import PIPELINES, PipelineConfig, fit_pipeline, warmup_featnet
from aqa.synthbench import generate_dataset

data = generate_dataset(159, "dive", split="mit-dive", seed=0)
# warm the extractor up on separate dives so no test split has been seen
pre = generate_dataset(200, "dive", split=(199, 1), seed=1000)
net, _ = warmup_featnet(pre, pre.ids, PipelineConfig(), seed=0)
cache = {}


def fit(ds, train, config, seed):
    # the warmed-up extractor stays frozen, as a pre-trained network would
    return fit_pipeline(ds, train, config, seed, featnet=net, feature_cache=cache)


plan = evalkit.SplitPlan(repeats=3, train_size=100, test_size=59)
table = evalkit.ResultTable()
for name in PIPELINES:
    table.rows += evalkit.run_protocol(data, PipelineConfig(name=name), plan, "mit-dive", fit=fit).rows
print(table.to_csv(include_wall=False))
print(evalkit.summary_csv(evalkit.summarize(table)))
