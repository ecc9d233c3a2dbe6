import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atprobe.embedstore import (MULTI_FRAME, SINGLE_FRAME, DataValidationError, Dataset, QAInstance,
                                Split, VideoRecord, ingest, kfold_split, load_dataset, make_synthetic,
                                save_dataset, synth_easy, synth_hard)


def _same(a: Dataset, b: Dataset):
    assert a.task == b.task and a.dim == b.dim and a.normalized == b.normalized
    assert a.splits.keys() == b.splits.keys()
    for name in a.splits:
        sa, sb = a[name], b[name]
        assert list(sa.videos) == list(sb.videos)
        for k in sa.videos:
            assert sa.videos[k].frames.tobytes() == sb.videos[k].frames.tobytes()
        assert len(sa.instances) == len(sb.instances)
        for x, y in zip(sa.instances, sb.instances):
            assert vars(x).keys() == vars(y).keys()
            for key, val in vars(x).items():
                if isinstance(val, np.ndarray):
                    assert val.dtype == np.float32 and val.tobytes() == vars(y)[key].tobytes()
                else:
                    assert val == vars(y)[key]


def test_round_trip_synthetic(tmp_path):
    ds = make_synthetic("mixed", 60, 40, seed=3)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    _same(ds, back)
    assert sum(len(s.videos) for s in back.splits.values()) == 100


def test_round_trip_retrieval(tmp_path):
    ds = make_synthetic("retrieval", 10, 5, seed=1)
    save_dataset(ds, tmp_path)
    _same(ds, load_dataset(tmp_path))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(2, 4), st.sampled_from([4, 8]),
       st.integers(0, 2**31 - 1))
def test_round_trip_random(tmp_path_factory, n_videos, n_frames, m, dim, seed):
    rng = np.random.default_rng(seed)
    split = Split("s")
    for v in range(n_videos):
        vid = f"v{v}"
        split.videos[vid] = VideoRecord(vid, rng.standard_normal((n_frames, dim)).astype(np.float32),
                                        source_fps=float(rng.integers(1, 30)))
        split.instances.append(QAInstance(f"i{v}", vid, rng.standard_normal(dim).astype(np.float32),
                                          rng.standard_normal((m, dim)).astype(np.float32),
                                          int(rng.integers(m)), category="c"))
    ds = Dataset("qa", dim, {"s": split}, normalized=False)
    root = tmp_path_factory.mktemp("rt")
    save_dataset(ds, root)
    _same(ds, load_dataset(root))


def test_empty_instance_list(tmp_path):
    split = Split("train", {"v": VideoRecord("v", np.ones((1, 8), np.float32) / np.sqrt(8))}, [])
    save_dataset(Dataset("qa", 8, {"train": split}), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["splits"][0]["instance_count"] == 0
    assert len(load_dataset(tmp_path)["train"]) == 0


def test_single_frame_blob_is_32_bytes(tmp_path):
    split = Split("train", {"v": VideoRecord("v", np.full((1, 8), 8 ** -0.5, np.float32))}, [])
    save_dataset(Dataset("qa", 8, {"train": split}), tmp_path)
    assert (tmp_path / "train" / "videos.bin").stat().st_size == 1 * 8 * 4


def test_truncated_blob_names_file(tmp_path):
    save_dataset(make_synthetic("easy", 5, 2, seed=0), tmp_path)
    blob = tmp_path / "train" / "videos.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(DataValidationError, match="byte length") as err:
        load_dataset(tmp_path)
    assert err.value.path == str(blob)


def test_gt_out_of_range_names_instance(tmp_path):
    save_dataset(make_synthetic("easy", 5, 2, seed=0), tmp_path)
    path = tmp_path / "train" / "instances.jsonl"
    recs = [json.loads(l) for l in path.read_text().splitlines()]
    recs[2]["gt_index"] = recs[2]["candidate_rows"][1]
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    with pytest.raises(DataValidationError, match="gt_index") as err:
        load_dataset(tmp_path)
    assert err.value.record == recs[2]["id"]


def test_missing_file_and_nonfinite(tmp_path):
    save_dataset(make_synthetic("easy", 3, 2, seed=0), tmp_path)
    blob = tmp_path / "val" / "language.bin"
    raw = bytearray(blob.read_bytes())
    raw[0:4] = np.float32(np.nan).tobytes()
    blob.write_bytes(bytes(raw))
    with pytest.raises(DataValidationError, match="non-finite"):
        load_dataset(tmp_path)
    blob.unlink()
    with pytest.raises(DataValidationError, match="missing"):
        load_dataset(tmp_path)


def test_normalization_checked_and_ingest(tmp_path):
    rng = np.random.default_rng(0)
    split = Split("train", {"v": VideoRecord("v", 3 * rng.standard_normal((4, 8)).astype(np.float32))},
                  [QAInstance("i", "v", rng.standard_normal(8).astype(np.float32),
                              rng.standard_normal((3, 8)).astype(np.float32), 1)])
    raw = tmp_path / "raw"
    save_dataset(Dataset("qa", 8, {"train": split}, normalized=True), raw)
    with pytest.raises(DataValidationError, match="norm"):
        load_dataset(raw)
    ds = ingest(raw, tmp_path / "clean")
    back = load_dataset(tmp_path / "clean")
    assert back.normalized and ds.normalized
    np.testing.assert_allclose(np.linalg.norm(back["train"].videos["v"].frames, axis=1), 1, atol=1e-6)


def test_synth_easy_zero_noise():
    s = synth_easy(50, 6, 5, 16, noise_scale=0.0, rng_seed=1)
    for inst in s.instances:
        frames = s.video_of(inst).frames
        hit = np.flatnonzero(np.all(frames == inst.candidates[inst.gt_index], axis=1))
        assert hit.size == 1
        assert inst.hardness_label == SINGLE_FRAME


def test_synth_easy_informative_frame_always_correct():
    s = synth_easy(200, 16, 5, 64, 0.3, rng_seed=2)
    for inst in s.instances:
        scores = s.video_of(inst).frames @ inst.candidates.T
        assert (np.argmax(scores, axis=1) == inst.gt_index).any()


def test_synth_easy_minimum_size():
    s = synth_easy(3, 2, 2, 8, 0.3, rng_seed=0)
    assert all(v.num_frames == 2 for v in s.videos.values())


def test_synth_hard_structure():
    s = synth_hard(100, 16, 64, 0.3, rng_seed=4)
    for inst in s.instances:
        assert inst.candidates.shape == (5, 64)
        assert inst.hardness_label == MULTI_FRAME
        np.testing.assert_allclose(np.linalg.norm(inst.candidates, axis=1), 1, atol=1e-6)
        # the opposite-order candidate is the exact negation of the answer
        neg = np.flatnonzero(np.all(np.isclose(inst.candidates, -inst.candidates[inst.gt_index], atol=1e-6),
                                    axis=1))
        assert neg.size == 1


def test_closed_form_pair_cosines():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        e1, e2 = rng.standard_normal((2, 16))
        e1, e2 = e1 / np.linalg.norm(e1), e2 / np.linalg.norm(e2)
        if e1 @ e2 < 1 - 1e-9:
            d = (e1 - e2) / np.linalg.norm(e1 - e2)
            assert e1 @ d > e1 @ -d


def _order_blind_accuracy(split):
    """Answer from the event frame closest to the question, choosing only within the order pair."""
    hits = []
    for inst in split.instances:
        frames = split.video_of(inst).frames
        event = frames[np.argmax(frames @ inst.question)]
        pair = [inst.gt_index, int(np.argmin(inst.candidates @ inst.candidates[inst.gt_index]))]
        hits.append(pair[int(np.argmax(inst.candidates[pair] @ event))] == inst.gt_index)
    return float(np.mean(hits))


def test_synth_hard_order_blind_is_coin_flip():
    acc = _order_blind_accuracy(synth_hard(2000, 16, 64, 0.3, rng_seed=11))
    assert abs(acc - 0.5) <= 0.03


def test_generators_validate_parameters():
    with pytest.raises(ValueError):
        synth_easy(1, 1, 5, 64)
    with pytest.raises(ValueError):
        synth_easy(1, 4, 5, 4)
    with pytest.raises(ValueError):
        synth_hard(1, 3, 64)


def test_kfold_sizes_and_determinism():
    assert [len(f) for f in kfold_split(10, 5, 0)] == [2] * 5
    assert sorted(len(f) for f in kfold_split(11, 5, 0)) == [2, 2, 2, 2, 3]
    a, b = kfold_split(37, 4, 9), kfold_split(37, 4, 9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        kfold_split(3, 4)
    with pytest.raises(ValueError):
        kfold_split(3, 1)


@given(st.integers(2, 200), st.data())
def test_kfold_is_partition(n, data):
    k = data.draw(st.integers(2, n))
    folds = kfold_split(n, k, data.draw(st.integers(0, 1000)))
    allidx = np.concatenate(folds)
    assert sorted(allidx.tolist()) == list(range(n))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
