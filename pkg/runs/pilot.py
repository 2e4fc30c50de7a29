from splatmark.pipeline import RunConfig, train
cfg = RunConfig(n_scenes=30, epochs=12, novel_views=2, out_dir="runs/pilot")
train(cfg, log=lambda *a: print(*a, flush=True))
