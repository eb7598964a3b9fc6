"""Smoke test for the flowm Python bindings.

Build the module first, e.g. `maturin develop -m crates/python/Cargo.toml`,
or put a built `flowm_py` extension on PYTHONPATH.
"""

import os
import tempfile

import flowm_py as fm

DESK_TINY = """
scale = desk
[env]
world = 12
window = 8
sprite_size = 5
frames = 10
[model]
hidden_channels = 4
[train]
obs_len = 4
pred_len = 3
long_pred_len = 6
batch_size = 4
epochs = 1
val_every = 2
val_episodes = 2
"""


def main():
    f = fm.Flow.at(1, -1, 3, 8)
    assert (f.dx, f.dy) == (3, 5), f
    g = f.compose(f.inverse())
    assert (g.dx, g.dy) == (0, 0)
    img = [[float(8 * y + x) for x in range(8)] for y in range(8)]
    rolled = fm.Flow(1, 0, 8).apply(img)
    assert rolled[0][1] == img[0][0] and rolled[0][0] == img[0][7]

    episodes = fm.generate(3, seed=5, config=DESK_TINY)
    again = fm.generate(3, seed=5, config=DESK_TINY)
    assert [e.frames for e in episodes] == [e.frames for e in again]
    ep = episodes[0]
    assert len(ep) == 10 and len(ep.actions) == 10

    model = fm.Model(world=12, window=8, hidden=4, radius=1, ablation="full", seed=0)
    assert len(model.velocities) == 9
    preds = model.rollout(ep.frames[:4], ep.actions, 5)
    assert len(preds) == 5 and len(preds[0]) == 8

    target = ep.frames[5]
    assert fm.mse(target, target) == 0.0
    assert abs(fm.ssim(target, target) - 1.0) < 1e-12
    assert fm.psnr(preds[0], target) > 0.0

    with tempfile.TemporaryDirectory() as d:
        data = os.path.join(d, "data.fwm")
        fm.write_data(data, 20, seed=1, config=DESK_TINY)
        assert len(fm.read_data(data)) == 20
        steps, best = fm.fit(data, os.path.join(d, "run"), config=DESK_TINY)
        assert steps > 0 and best is not None
        trained = fm.Model.load(os.path.join(d, "run", "checkpoint_best.fwmc"))
        assert trained.ablation == "full"
        model.save(os.path.join(d, "m.fwmc"))
        assert fm.Model.load(os.path.join(d, "m.fwmc")).param_count == model.param_count

    ok, table = fm.verify("theorem", seed=0, trials=2)
    assert ok, table
    try:
        fm.Model(ablation="nonsense")
    except ValueError:
        pass
    else:
        raise AssertionError("bad ablation accepted")
    print("flowm_py smoke test passed")


if __name__ == "__main__":
    main()
