from pathlib import Path

import cv2
import numpy as np
import pytest

from seeable.core.exceptions import DataError
from seeable.models.data_models import ManifestRecord
from seeable.services.dataset import (
    MANIFEST_COLUMNS,
    FaceLoader,
    filter_records,
    group_by_video,
    load_manifest,
    read_image,
    save_manifest,
    write_image,
)
from seeable.services.synthetic_corpus import TEMPLATE, SyntheticFaceGenerator, synth_corpus


def record(video_id, frame_index, label="real", split="train"):
    landmarks = [(10.0 + i * 0.25, 12.0 + i * 0.125) for i in range(68)]
    return ManifestRecord(
        image_path=f"frames/{video_id}/{frame_index:03d}.png", video_id=video_id, split=split,
        label=label, frame_index=frame_index, landmarks=landmarks,
    )


class TestManifest:
    def test_roundtrip(self, tmp_path):
        records = [record("a", 1), record("a", 0), record("b", 0, label="fake", split="test")]
        path = save_manifest(records, tmp_path / "m.csv")
        assert path.read_text().splitlines()[0].split(",") == MANIFEST_COLUMNS
        assert load_manifest(path) == records

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(tmp_path / "none.csv")

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("image_path,video_id\nx.png,a\n", encoding="utf-8")
        with pytest.raises(DataError):
            load_manifest(path)

    def test_invalid_label(self, tmp_path):
        path = save_manifest([record("a", 0)], tmp_path / "m.csv")
        path.write_text(path.read_text().replace(",real,", ",unknown,"), encoding="utf-8")
        with pytest.raises(DataError):
            load_manifest(path)

    def test_non_numeric_landmarks(self, tmp_path):
        path = save_manifest([record("a", 0)], tmp_path / "m.csv")
        lines = path.read_text().splitlines()
        cells = lines[1].split(",")
        cells[-1] = "abc"
        path.write_text("\n".join([lines[0], ",".join(cells)]) + "\n", encoding="utf-8")
        with pytest.raises(DataError):
            load_manifest(path)

    def test_undecodable_bytes(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_bytes(b"image_path,video_id\n\xff\xfe\xfa,\x80\n")
        with pytest.raises(DataError):
            load_manifest(path)

    def test_group_and_filter(self):
        records = [record("b", 1), record("a", 0), record("b", 0), record("c", 0, label="fake")]
        groups = group_by_video(records)
        assert list(groups) == ["b", "a", "c"]
        assert [r.frame_index for r in groups["b"]] == [0, 1]
        assert len(filter_records(records, label="real")) == 3
        assert len(filter_records(records, split="test")) == 0


class TestImages:
    def test_write_and_read(self, tmp_path, face):
        path = write_image(tmp_path / "f.png", face.pixels)
        pixels = read_image(path)
        assert pixels.dtype == np.float64
        assert np.array_equal(pixels, face.quantized().astype(np.float64))

    def test_channel_order(self, tmp_path):
        pixels = np.zeros((4, 4, 3))
        pixels[..., 0] = 255.0
        write_image(tmp_path / "red.png", pixels)
        bgr = cv2.imread(str(tmp_path / "red.png"))
        assert bgr[0, 0].tolist() == [0, 0, 255]

    def test_unreadable(self, tmp_path):
        with pytest.raises(DataError):
            read_image(tmp_path / "none.png")

    def test_corrupt_image(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"not an image")
        with pytest.raises(DataError):
            read_image(path)

    def test_write_below_a_file(self, tmp_path, face):
        blocker = tmp_path / "frames"
        blocker.write_text("x", encoding="utf-8")
        with pytest.raises(DataError):
            write_image(blocker / "f.png", face.pixels)

    def test_loader_resolves_relative_paths(self, small_corpus):
        root = Path(small_corpus.manifest_path).parent
        loader = FaceLoader(root)
        first = small_corpus.records[0]
        face = loader.load(first)
        assert face.size == (32, 32)
        assert face.frame_index == first.frame_index
        assert loader.load(first) is face


class TestSyntheticCorpus:
    def test_template(self):
        assert TEMPLATE.shape == (68, 2)
        # 左右对称
        assert TEMPLATE[0, 0] == pytest.approx(-TEMPLATE[16, 0])

    def test_splits_and_labels(self, small_corpus):
        records = small_corpus.records
        train = filter_records(records, split="train")
        assert {r.label for r in train} == {"real"}
        assert len({r.video_id for r in train}) == 9
        test = filter_records(records, split="test")
        assert len({r.video_id for r in test if r.label == "real"}) == 3
        assert len({r.video_id for r in test if r.label == "fake"}) == 3
        assert load_manifest(small_corpus.manifest_path) == records

    def test_landmarks_in_bounds(self, small_corpus):
        for r in small_corpus.records:
            pts = np.asarray(r.landmarks)
            assert pts.min() >= 0.0 and pts.max() <= 31.0

    def test_same_seed_same_corpus(self, tmp_path):
        a = synth_corpus(3, 2, 7, tmp_path / "a", image_size=32, held_out_frac=0.34)
        b = synth_corpus(3, 2, 7, tmp_path / "b", image_size=32, held_out_frac=0.34)
        assert a.records == b.records
        for r in a.records:
            assert (tmp_path / "a" / r.image_path).read_bytes() == (tmp_path / "b" / r.image_path).read_bytes()

    def test_fakes_differ_from_sources(self, small_corpus):
        root = Path(small_corpus.manifest_path).parent
        fakes = filter_records(small_corpus.records, label="fake")
        assert len(fakes) == 6
        for r in fakes:
            fake = read_image(root / r.image_path)
            real = read_image(root / small_corpus.fake_sources[r.image_path])
            region = np.zeros(fake.shape[:2], dtype=np.uint8)
            cv2.fillConvexPoly(region, cv2.convexHull(np.rint(r.landmarks).astype(np.int32)), 1)
            region = region.astype(bool)
            changed = (np.abs(fake - real).max(axis=2) > 2.0)[region]
            assert changed.mean() > 0.10

    def test_identity_is_stable_across_frames(self):
        gen = SyntheticFaceGenerator(image_size=48, seed=1)
        identity = gen.identity(2)
        a, b = gen.render(identity, 0), gen.render(identity, 1)
        assert not np.array_equal(a.landmarks, b.landmarks)
        assert np.abs(a.landmarks - b.landmarks).max() < 48 * 0.1
