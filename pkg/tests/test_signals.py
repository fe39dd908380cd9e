import numpy as np
import pytest

from qppg.signals import (ParseError, ProtocolError, SchemaError, SignalRecord, SynthConfig,
                          WindowSet, load_record, make_windows, save_record, signal_windows,
                          split_holdout, split_loso, synth_generate, windows_from_records)


def _record(length, labels=None, sid="A"):
    labels = labels if labels is not None else np.arange(255, length, 64)
    return SignalRecord(sid, np.zeros((4, length)), labels, np.full(len(labels), 80.0))


def _write(path, rows, header="t,ppg,ax,ay,az", labels=((100, 70.0),)):
    path.write_text(header + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    path.with_suffix(".labels.csv").write_text(
        "t_index,bpm\n" + "".join(f"{i},{b}\n" for i, b in labels))
    return path


class TestIO:
    def test_roundtrip_320(self, tmp_path):
        rec = SignalRecord("s", np.arange(4 * 320, dtype=np.float32).reshape(4, 320),
                           [63, 127, 191, 255, 319], [70, 71, 72, 73, 74.5])
        save_record(rec, tmp_path / "s.csv")
        back = load_record(tmp_path / "s.csv")
        assert back.length == 320
        np.testing.assert_array_equal(back.channels, rec.channels)
        np.testing.assert_array_equal(back.label_bpm, rec.label_bpm)

    def test_three_channels(self, tmp_path):
        p = _write(tmp_path / "a.csv", [(0, 1, 2, 3)], header="t,ppg,ax,ay")
        with pytest.raises(SchemaError):
            load_record(p)

    def test_malformed_row_names_line(self, tmp_path):
        p = _write(tmp_path / "a.csv", [(0, 1, 2, 3, 4), (1, "x", 2, 3, 4)])
        with pytest.raises(ParseError, match=":3:"):
            load_record(p)

    def test_labels_not_monotone(self):
        with pytest.raises(SchemaError):
            SignalRecord("s", np.zeros((4, 300)), [100, 50], [70, 70])


class TestWindows:
    @pytest.mark.parametrize("length,n", [(320, 2), (256, 1), (32 * 3600, 1797)])
    def test_count(self, length, n):
        ws = make_windows(_record(length))
        assert len(ws) == n
        assert ws.inputs.shape == (n, 4, 256)

    def test_offsets(self):
        ch = np.tile(np.arange(400.0), (4, 1))
        ws = make_windows(SignalRecord("s", ch, [255, 319, 383], [60, 61, 62]))
        assert [w[0, 0] for w in ws.inputs] == [0, 64, 128]
        np.testing.assert_array_equal(ws.targets, [60, 61, 62])

    def test_short(self):
        with pytest.raises(ValueError):
            make_windows(_record(200, labels=np.array([100])))

    def test_nearest_label_tie_goes_later(self):
        # window end 255; labels at 250 and 260 are equidistant
        rec = SignalRecord("s", np.zeros((4, 256)), [250, 260], [70, 90])
        assert make_windows(rec).targets[0] == 90
        rec = SignalRecord("s", np.zeros((4, 256)), [249, 260], [70, 90])
        assert make_windows(rec).targets[0] == 90
        rec = SignalRecord("s", np.zeros((4, 256)), [251, 260], [70, 90])
        assert make_windows(rec).targets[0] == 70

    def test_label_far_from_window(self):
        rec = SignalRecord("s", np.zeros((4, 1000)), [10], [70])
        with pytest.raises(ProtocolError):
            make_windows(rec)

    def test_signal_windows_matches(self):
        rec = synth_generate(SynthConfig(n_subjects=1, duration_s=40))[0]
        np.testing.assert_array_equal(signal_windows(rec.channels), make_windows(rec).inputs)


class TestSplits:
    def _windows(self, n_subj, per=3):
        sid = np.repeat([f"S{i}" for i in range(n_subj)], per).astype(object)
        n = len(sid)
        return WindowSet(np.zeros((n, 4, 256)), np.full(n, 70.0), sid)

    def test_fifteen_subjects(self):
        ws = self._windows(15)
        parts = split_loso(ws, 4, seed=1)
        assert len(parts) == 15
        for tr, va, te in parts:
            assert len(set(ws.subject_ids[te])) == 1
            assert not set(ws.subject_ids[te]) & set(ws.subject_ids[tr])
            assert not set(tr) & set(va)

    def test_two_subjects(self):
        ws = self._windows(2, per=10)
        parts = split_loso(ws, 2)
        assert len(parts) == 2
        for tr, va, te in parts:
            assert not set(ws.subject_ids[tr]) & set(ws.subject_ids[te])
            assert len(va) > 0

    def test_deterministic(self):
        ws = self._windows(7)
        a, b = split_loso(ws, 4, seed=5), split_loso(ws, 4, seed=5)
        for p, q in zip(a, b):
            for x, y in zip(p, q):
                np.testing.assert_array_equal(x, y)

    def test_single_subject(self):
        with pytest.raises(ProtocolError):
            split_loso(self._windows(1))

    def test_holdout_disjoint_in_time(self):
        ws = self._windows(2, per=100)
        tr, va, te = split_holdout(ws)
        assert not (set(tr) & set(va)) and not (set(va) & set(te))
        for s in ("S0", "S1"):
            t, v, e = (p[ws.subject_ids[p] == s] for p in (tr, va, te))
            assert t.max() + 3 < v.min() and v.max() + 3 < e.min()


class TestSynth:
    def test_pure_sinusoid(self):
        cfg = SynthConfig(n_subjects=1, duration_s=20, motion_gain=0, noise_std=0,
                          harmonic_gains=(1.0,), hr_range=(60, 60), hr_start=60, hr_step_std=0)
        rec = synth_generate(cfg)[0]
        t = np.arange(rec.length) / 32
        np.testing.assert_allclose(rec.channels[0], np.sin(2 * np.pi * t), atol=1e-5)
        assert np.all(np.diff(rec.label_index) == 64)
        np.testing.assert_array_equal(make_windows(rec).targets, 60.0)

    def test_spectral_peak(self):
        cfg = SynthConfig(n_subjects=1, duration_s=64, motion_gain=0, noise_std=0,
                          hr_range=(60, 60), hr_start=60, hr_step_std=0)
        ppg = synth_generate(cfg)[0].channels[0]
        f = np.fft.rfftfreq(len(ppg), 1 / 32)
        assert abs(f[np.argmax(np.abs(np.fft.rfft(ppg)))] - 1.0) <= 0.05

    def test_accel_uncorrelated_with_cardiac(self):
        base = dict(n_subjects=1, duration_s=600, seed=3)
        clean = synth_generate(SynthConfig(**base, motion_gain=0, noise_std=0))[0].channels[0]
        rec = synth_generate(SynthConfig(**base))[0]
        for a in rec.channels[1:]:
            assert abs(np.corrcoef(a, clean)[0, 1]) < 0.1

    def test_seeded(self):
        a = synth_generate(SynthConfig(seed=9, duration_s=30))
        b = synth_generate(SynthConfig(seed=9, duration_s=30))
        np.testing.assert_array_equal(a[1].channels, b[1].channels)
        assert not np.array_equal(a[0].channels, a[1].channels)

    def test_labels_in_range(self):
        ws = windows_from_records(synth_generate(SynthConfig(duration_s=300, hr_step_std=3)))
        assert ws.targets.min() >= 50 and ws.targets.max() <= 150

    def test_window_helper(self):
        assert SynthConfig.windows_to_duration(1) == 8.0
        n = len(make_windows(synth_generate(SynthConfig(n_subjects=1,
                                                        duration_s=SynthConfig.windows_to_duration(37)))[0]))
        assert n == 37
