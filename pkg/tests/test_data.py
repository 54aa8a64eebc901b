import numpy as np
import pytest

from vdmr.data import (DEFAULT_TEMPLATES, SyntheticSpec, TimedAnnotation,
                       generate_synthetic, load_annotations, load_dataset,
                       load_predictions, save_annotations, save_dataset,
                       save_predictions, template_frame, template_query)
from vdmr.encoders import StubVisualEncoder
from vdmr.errors import ParseError
from vdmr.text import QuerySentence


class TestLoadAnnotations:
    def write(self, tmp_path, text):
        path = tmp_path / "ann.txt"
        path.write_text(text, encoding="utf-8")
        return path

    def test_basic_line(self, tmp_path):
        path = self.write(tmp_path, "AO8RW 0.0 6.9##a person opens the door\n")
        anns = load_annotations(path)
        assert len(anns) == 1
        a = anns[0]
        assert a.video_id == "AO8RW"
        assert a.start_s == 0.0 and a.end_s == 6.9
        assert a.query.raw == "a person opens the door"

    def test_empty_file(self, tmp_path):
        assert load_annotations(self.write(tmp_path, "")) == []

    def test_start_after_end(self, tmp_path):
        path = self.write(tmp_path, "x 5 3##q\n")
        with pytest.raises(ParseError):
            load_annotations(path)

    def test_missing_separator_reports_line(self, tmp_path):
        path = self.write(tmp_path, "a 0 1##ok\nbroken line\n")
        with pytest.raises(ParseError) as exc:
            load_annotations(path)
        assert exc.value.line_number == 2

    def test_durations_override(self, tmp_path):
        path = self.write(tmp_path, "v 1.0 3.0##the door opens\n")
        anns = load_annotations(path, durations={"v": 10.0})
        assert anns[0].duration_s == 10.0

    def test_roundtrip(self, tmp_path):
        anns = [TimedAnnotation("vid1", QuerySentence.from_raw("the door opens"),
                                1.25, 7.5, 16.0),
                TimedAnnotation("vid2", QuerySentence.from_raw("the dog runs"),
                                0.0, 3.000001, 16.0)]
        path = tmp_path / "rt.txt"
        save_annotations(path, anns)
        loaded = load_annotations(path, durations={"vid1": 16.0, "vid2": 16.0})
        for a, b in zip(anns, loaded):
            assert a.video_id == b.video_id
            assert a.query.raw == b.query.raw
            assert abs(a.start_s - b.start_s) < 1e-6
            assert abs(a.end_s - b.end_s) < 1e-6


class TestTimedAnnotation:
    def test_invariant(self):
        with pytest.raises(ValueError):
            TimedAnnotation("v", QuerySentence.from_raw("the door opens"),
                            5.0, 3.0, 16.0)
        with pytest.raises(ValueError):
            TimedAnnotation("v", QuerySentence.from_raw("the door opens"),
                            0.0, 20.0, 16.0)


def small_spec(**kw):
    defaults = dict(num_videos=10, frames_per_video=8, seed=3,
                    min_moment_frames=2, max_moment_frames=5)
    defaults.update(kw)
    return SyntheticSpec(**defaults)


class TestGenerateSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(small_spec())
        b = generate_synthetic(small_spec())
        assert [s.annotation.video_id for s in a.samples] == \
            [s.annotation.video_id for s in b.samples]
        for vid in a.payloads:
            assert np.array_equal(a.payloads[vid], b.payloads[vid])

    def test_annotations_valid(self):
        ds = generate_synthetic(small_spec(num_videos=30))
        for s in ds.samples:
            ann = s.annotation
            assert 0 <= ann.start_s < ann.end_s <= ann.duration_s
            assert ann.duration_s == ds.frames_per_video

    def test_whole_video_moment(self):
        spec = SyntheticSpec(num_videos=3, frames_per_video=4, seed=0,
                             min_moment_frames=4, max_moment_frames=4,
                             templates=(("door", "open"),))
        ds = generate_synthetic(spec)
        for s in ds.samples:
            assert (s.annotation.start_s, s.annotation.end_s) == (0.0, 4.0)

    def test_planted_frames_identical_across_videos(self):
        # same template, same offset within the moment => same payload,
        # so the stub encoder maps them to identical features
        spec = SyntheticSpec(num_videos=6, frames_per_video=8, seed=1,
                             min_moment_frames=3, max_moment_frames=3,
                             templates=(("door", "open"),))
        ds = generate_synthetic(spec)
        starts = {s.annotation.video_id: int(s.annotation.start_s)
                  for s in ds.samples}
        vids = list(starts)
        enc = StubVisualEncoder(dim=8, seed=0)
        f0 = ds.payloads[vids[0]][starts[vids[0]]]
        f1 = ds.payloads[vids[1]][starts[vids[1]]]
        assert np.array_equal(f0, f1)
        e0 = enc.encode_frames([f0]).global_
        e1 = enc.encode_frames([f1]).global_
        assert np.allclose(e0.numpy(), e1.numpy())

    def test_distractors_differ_from_moment(self):
        spec = small_spec(num_videos=20)
        ds = generate_synthetic(spec)
        for s in ds.samples:
            ann = s.annotation
            frames = ds.payloads[ann.video_id]
            inside = frames[int(ann.start_s)]
            for k in range(ds.frames_per_video):
                if not ann.start_s <= k < ann.end_s:
                    assert not np.array_equal(frames[k], inside)

    def test_query_matches_template(self):
        assert template_query("door", "open") == "the door opens"
        ds = generate_synthetic(small_spec())
        nouns = {t[0] for t in DEFAULT_TEMPLATES}
        for s in ds.samples:
            tokens = s.annotation.query.tokens
            assert tokens[0] == "the" and tokens[1] in nouns

    def test_template_frame_components(self):
        f = template_frame("door", "open", step=0)
        g = template_frame("door", "open", step=1)
        # entity block constant over time, spot moves
        assert np.array_equal(f[:4, :4], g[:4, :4])
        assert not np.array_equal(f, g)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(num_videos=0)
        with pytest.raises(ValueError):
            SyntheticSpec(min_moment_frames=9, max_moment_frames=4)


class TestDatasetDirectory:
    def test_save_load_roundtrip(self, tmp_path):
        ds = generate_synthetic(small_spec())
        save_dataset(tmp_path / "d", ds, meta={"seed": 3})
        loaded = load_dataset(tmp_path / "d")
        assert loaded.frames_per_video == ds.frames_per_video
        assert len(loaded.samples) == len(ds.samples)
        for s in loaded.samples:
            vid = s.annotation.video_id
            assert np.array_equal(loaded.payloads[vid], ds.payloads[vid])
            assert s.annotation.duration_s == ds.frames_per_video

    def test_byte_identical_across_runs(self, tmp_path):
        for name in ("d1", "d2"):
            save_dataset(tmp_path / name, generate_synthetic(small_spec()),
                         meta={"seed": 3})
        for fname in ("payloads.npy", "annotations.txt", "meta.json"):
            a = (tmp_path / "d1" / fname).read_bytes()
            b = (tmp_path / "d2" / fname).read_bytes()
            assert a == b, fname

    def test_subset(self):
        ds = generate_synthetic(small_spec())
        sub = ds.subset([0, 2])
        assert len(sub.samples) == 2
        assert set(sub.payloads) == {s.annotation.video_id
                                     for s in sub.samples}


class TestPredictions:
    def test_jsonl_roundtrip(self, tmp_path):
        path = tmp_path / "preds.jsonl"
        save_predictions(path, {
            "q1": {"video_id": "v1", "segments": [(0.0, 2.0, 0.9),
                                                  (1.0, 3.0, 0.5)]},
        })
        loaded = load_predictions(path)
        assert loaded["q1"][0] == (0.0, 2.0, 0.9)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("not json\n", encoding="utf-8")
        with pytest.raises(ParseError):
            load_predictions(path)
