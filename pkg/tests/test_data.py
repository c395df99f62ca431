"""Containers, the binary trial format, decimation, and the generator."""
import numpy as np
import pytest
from scipy.signal import welch

from eegitnet.data import (EpochSet, SourceSpec, SynthSpec, concat_epochs,
                           decimate, extract_epochs, load_epochs, montage_22,
                           ring_layout, save_epochs, standardize,
                           synth_generate, window_samples)
from eegitnet.errors import FormatError


def small_set(rng, n_trials=6, n_channels=3, n_samples=20, n_classes=2, fs=100.0):
    trials = rng.standard_normal((n_trials, n_channels, n_samples)).astype(np.float32)
    labels = np.arange(n_trials) % n_classes
    names = tuple(f"ch{i}" for i in range(n_channels))
    xy = ring_layout(n_channels)
    classes = tuple(f"class{i}" for i in range(n_classes))
    return EpochSet(trials, labels, classes, names, xy, fs)


# ----------------------------------------------------------------------
# container validation

def test_epochset_validates_shapes(rng):
    good = small_set(rng)
    with pytest.raises(ValueError):
        EpochSet(good.trials[:, :, 0], good.labels, good.class_names,
                 good.channel_names, good.channel_xy, good.fs)
    with pytest.raises(ValueError):
        EpochSet(good.trials, good.labels[:-1], good.class_names,
                 good.channel_names, good.channel_xy, good.fs)
    with pytest.raises(ValueError):
        EpochSet(good.trials, good.labels + 5, good.class_names,
                 good.channel_names, good.channel_xy, good.fs)
    with pytest.raises(ValueError):
        EpochSet(good.trials, good.labels, good.class_names,
                 good.channel_names[:-1], good.channel_xy, good.fs)


def test_subset_selects_trials(rng):
    s = small_set(rng)
    sub = s.subset([0, 2, 4])
    assert sub.n_trials == 3
    np.testing.assert_array_equal(sub.trials, s.trials[[0, 2, 4]])
    np.testing.assert_array_equal(sub.labels, s.labels[[0, 2, 4]])


def test_concat_requires_identical_metadata(rng):
    a = small_set(rng)
    b = small_set(rng)
    both = concat_epochs([a, b])
    assert both.n_trials == a.n_trials + b.n_trials
    np.testing.assert_array_equal(both.trials[:a.n_trials], a.trials)
    other_classes = EpochSet(a.trials, a.labels, ("x", "y"), a.channel_names,
                             a.channel_xy, a.fs)
    with pytest.raises(ValueError, match="label-space"):
        concat_epochs([a, other_classes])
    other_fs = EpochSet(a.trials, a.labels, a.class_names, a.channel_names,
                        a.channel_xy, 200.0)
    with pytest.raises(ValueError, match="[Ss]ampling"):
        concat_epochs([a, other_fs])


# ----------------------------------------------------------------------
# the binary trial container

def test_epoch_file_round_trip_is_bit_exact(tmp_path, rng):
    s = small_set(rng)
    path = tmp_path / "s.eegepoch"
    save_epochs(s, path)
    loaded = load_epochs(path)
    np.testing.assert_array_equal(loaded.trials, s.trials)
    np.testing.assert_array_equal(loaded.labels, s.labels)
    np.testing.assert_array_equal(loaded.channel_xy, s.channel_xy)
    assert loaded.class_names == s.class_names
    assert loaded.channel_names == s.channel_names
    assert loaded.fs == s.fs
    # a second save of the loaded set produces identical bytes
    path2 = tmp_path / "s2.eegepoch"
    save_epochs(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_epoch_file_bad_magic(tmp_path, rng):
    path = tmp_path / "s.eegepoch"
    save_epochs(small_set(rng), path)
    blob = bytearray(path.read_bytes())
    blob[:8] = b"NOTEPOCH"
    path.write_bytes(blob)
    with pytest.raises(FormatError) as err:
        load_epochs(path)
    assert err.value.code == "bad_magic"


@pytest.mark.parametrize("keep", [4, 20, 60, 130])
def test_epoch_file_truncation(tmp_path, rng, keep):
    path = tmp_path / "s.eegepoch"
    save_epochs(small_set(rng), path)
    path.write_bytes(path.read_bytes()[:keep])
    with pytest.raises(FormatError) as err:
        load_epochs(path)
    assert err.value.code in ("truncated", "bad_magic")


def test_epoch_file_extent_overflow(tmp_path, rng):
    import struct
    path = tmp_path / "s.eegepoch"
    save_epochs(small_set(rng), path)
    blob = bytearray(path.read_bytes())
    # inflate the declared trial count far past the element limit
    blob[12:16] = struct.pack("<I", 2 ** 31 - 1)
    path.write_bytes(blob)
    with pytest.raises(FormatError) as err:
        load_epochs(path)
    assert err.value.code == "extent_overflow"


def test_epoch_file_label_out_of_range(tmp_path, rng):
    import struct
    s = small_set(rng)
    path = tmp_path / "s.eegepoch"
    save_epochs(s, path)
    blob = bytearray(path.read_bytes())
    # labels start right after header + channel table + class names
    offset = len(blob) - 4 * s.n_trials - 4 * s.trials.size
    blob[offset:offset + 4] = struct.pack("<I", 99)
    path.write_bytes(blob)
    with pytest.raises(FormatError) as err:
        load_epochs(path)
    assert err.value.code == "bad_value"


# ----------------------------------------------------------------------
# decimation

def test_decimate_length_and_identity(rng):
    x = rng.standard_normal(101).astype(np.float32)
    assert decimate(x, 1) is not x
    np.testing.assert_array_equal(decimate(x, 1), x)
    assert decimate(x, 4).shape == (25,)
    assert decimate(x, 4).dtype == np.float32
    with pytest.raises(ValueError):
        decimate(x, 0)
    with pytest.raises(ValueError):
        decimate(x, 200)


def test_decimate_passband_sine_survives_with_zero_phase():
    fs, factor = 1000.0, 4
    t = np.arange(4000) / fs
    f0 = 20.0  # far below the post-decimation cutoff of 112.5 Hz
    x = np.sin(2 * np.pi * f0 * t)
    y = decimate(x, factor)
    t_new = t[::factor][:len(y)]
    ref = np.sin(2 * np.pi * f0 * t_new)
    # zero-phase filtering: no lag anywhere away from the record edges; the
    # double-pass passband droop of the 63-tap window design is under 1%
    core = slice(50, -50)
    assert np.abs(y[core] - ref[core]).max() < 0.02
    # no phase shift: the cross-correlation peaks at zero lag
    lags = [np.dot(y[core], np.roll(ref, k)[core]) for k in (-2, -1, 0, 1, 2)]
    assert int(np.argmax(lags)) == 2


def test_decimate_attenuates_aliasing_band():
    fs, factor = 1000.0, 4
    t = np.arange(4000) / fs
    x = np.sin(2 * np.pi * 400.0 * t)  # above the new Nyquist of 125 Hz
    y = decimate(x, factor)
    # forward-backward filtering squares the stopband attenuation
    assert np.sqrt(np.mean(y[50:-50] ** 2)) < 1e-3 * np.sqrt(0.5)


def test_decimate_preserves_dc():
    x = np.full(500, 3.7)
    y = decimate(x, 5)
    np.testing.assert_allclose(y, 3.7, rtol=1e-9)


def test_decimate_works_along_last_axis(rng):
    x = rng.standard_normal((2, 3, 120))
    y = decimate(x, 3)
    assert y.shape == (2, 3, 40)
    np.testing.assert_allclose(y[1, 2], decimate(x[1, 2], 3), rtol=1e-12)


def test_window_samples():
    assert window_samples(125.0, 3.0) == 375
    assert window_samples(250.0, 4.5) == 1125
    assert window_samples(250.0, 2.0) == 500


# ----------------------------------------------------------------------
# standardization

def test_standardize_zeroes_training_moments(rng):
    train = small_set(rng, n_trials=20, n_samples=50)
    test = small_set(rng, n_trials=8, n_samples=50)
    (train_z, test_z), stats = standardize(train, test)
    got_mean = train_z.trials.astype(np.float64).mean(axis=(0, 2))
    got_std = train_z.trials.astype(np.float64).std(axis=(0, 2))
    np.testing.assert_allclose(got_mean, 0.0, atol=1e-6)
    np.testing.assert_allclose(got_std, 1.0, rtol=1e-5)
    # the *same* affine map is applied to the test set
    ref = (test.trials.astype(np.float64) - stats.mean[:, None]) / stats.std[:, None]
    np.testing.assert_allclose(test_z.trials, ref.astype(np.float32), rtol=1e-6)


def test_standardize_statistics_come_from_train_only(rng):
    train = small_set(rng, n_trials=10, n_samples=40)
    shifted = EpochSet(train.trials + 100.0, train.labels, train.class_names,
                       train.channel_names, train.channel_xy, train.fs)
    (_, shifted_z), _ = standardize(train, shifted)
    # the shift survives because the test set never touches the statistics
    assert shifted_z.trials.mean() > 50


def test_standardize_rejects_flat_channel(rng):
    s = small_set(rng)
    flat = s.trials.copy()
    flat[:, 1, :] = 2.5
    bad = EpochSet(flat, s.labels, s.class_names, s.channel_names,
                   s.channel_xy, s.fs)
    with pytest.raises(ValueError, match="ch1"):
        standardize(bad)


# ----------------------------------------------------------------------
# epoch extraction and layouts

def test_extract_epochs_cuts_requested_windows(rng):
    record = rng.standard_normal((3, 100)).astype(np.float32)
    out = extract_epochs(record, [0, 10, 60], 40)
    assert out.shape == (3, 3, 40)
    np.testing.assert_array_equal(out[1], record[:, 10:50])
    with pytest.raises(ValueError):
        extract_epochs(record, [70], 40)
    with pytest.raises(ValueError):
        extract_epochs(record, [-1], 40)


def test_montage_covers_22_unique_positions():
    names, xy = montage_22()
    assert len(names) == len(set(names)) == 22
    assert xy.shape == (22, 2)
    assert (np.linalg.norm(xy, axis=1) <= 1.0).all()
    assert "Cz" in names and "Fz" in names


def test_ring_layout_radius():
    xy = ring_layout(7)
    np.testing.assert_allclose(np.linalg.norm(xy, axis=1), 0.8, rtol=1e-6)
    assert ring_layout(1).shape == (1, 2)


# ----------------------------------------------------------------------
# synthetic generator

def two_source_spec(n_trials=40, noise=0.1, seed=3):
    return SynthSpec(
        n_trials=n_trials, n_channels=6, n_classes=2, fs=125.0, duration_s=3.0,
        sources=[
            [SourceSpec(10.0, 2.0, 1.0, (1.0, 0.7, 0.2, 0.0, 0.0, 0.0))],
            [SourceSpec(22.0, 2.0, 1.0, (0.0, 0.0, 0.1, 0.3, 1.0, 0.6))],
        ],
        noise_sigma=noise, seed=seed)


def test_synth_is_balanced_and_deterministic():
    spec = two_source_spec()
    a = synth_generate(spec)
    b = synth_generate(spec)
    np.testing.assert_array_equal(a.trials, b.trials)
    np.testing.assert_array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels)
    np.testing.assert_array_equal(counts, [20, 20])
    c = synth_generate(two_source_spec(seed=4))
    assert not np.array_equal(a.trials, c.trials)


def test_synth_plants_power_in_the_declared_band():
    epochs = synth_generate(two_source_spec(n_trials=20, noise=0.0))
    for label, (lo, hi) in ((0, (8.5, 11.5)), (1, (20.5, 23.5))):
        trials = epochs.trials[epochs.labels == label].astype(np.float64)
        # strongest channel of the mixing column
        ch = 0 if label == 0 else 4
        freqs, psd = welch(trials[:, ch, :], fs=125.0, nperseg=375, axis=-1)
        psd = psd.mean(axis=0)
        band = (freqs >= lo) & (freqs <= hi)
        assert psd[band].sum() > 1000 * psd[~band].sum(), f"class {label}"


def test_synth_channel_power_follows_mixing_column():
    epochs = synth_generate(two_source_spec(n_trials=20, noise=0.0))
    mix = np.asarray(two_source_spec().sources[0][0].mixing)
    trials = epochs.trials[epochs.labels == 0].astype(np.float64)
    rms = np.sqrt((trials ** 2).mean(axis=(0, 2)))
    corr = np.corrcoef(rms, np.abs(mix))[0, 1]
    assert corr > 0.99


def test_synth_noise_sigma_controls_floor():
    quiet = synth_generate(two_source_spec(noise=0.0, seed=8))
    noisy = synth_generate(two_source_spec(noise=0.5, seed=8))
    # channel 5 carries nothing for class 0 in the quiet set
    c0 = quiet.labels == 0
    assert np.abs(quiet.trials[c0][:, 5, :]).max() < 1e-6
    assert noisy.trials[noisy.labels == 0][:, 5, :].std() == pytest.approx(0.5, rel=0.1)


def test_synth_uses_montage_for_22_channels():
    spec = SynthSpec(
        n_trials=2, n_channels=22, n_classes=2, fs=125.0, duration_s=1.0,
        sources=[[SourceSpec(10.0, 2.0, 1.0, tuple([1.0] * 22))],
                 [SourceSpec(20.0, 2.0, 1.0, tuple([1.0] * 22))]],
        seed=0)
    epochs = synth_generate(spec)
    assert epochs.channel_names == montage_22()[0]


def test_synth_spec_validation():
    with pytest.raises(ValueError, match="Nyquist"):
        SynthSpec(
            n_trials=4, n_channels=2, n_classes=2, fs=125.0, duration_s=1.0,
            sources=[[SourceSpec(70.0, 2.0, 1.0, (1.0, 0.0))],
                     [SourceSpec(10.0, 2.0, 1.0, (0.0, 1.0))]])
    with pytest.raises(ValueError, match="divide evenly"):
        SynthSpec(n_trials=5, n_channels=2, n_classes=2, fs=125.0, duration_s=1.0,
                  sources=[[SourceSpec(10.0, 2.0, 1.0, (1.0, 0.0))],
                           [SourceSpec(20.0, 2.0, 1.0, (0.0, 1.0))]])
    with pytest.raises(ValueError, match="mixing column"):
        SynthSpec(n_trials=4, n_channels=3, n_classes=2, fs=125.0, duration_s=1.0,
                  sources=[[SourceSpec(10.0, 2.0, 1.0, (1.0, 0.0))],
                           [SourceSpec(20.0, 2.0, 1.0, (0.0, 1.0))]])
    with pytest.raises(ValueError):
        SourceSpec(10.0, 2.0, 1.0, (0.0, 0.0))


def test_synth_rejects_band_between_grid_points():
    # 375 samples at 125 Hz -> grid spacing 1/3 Hz; this band misses it
    spec = SynthSpec(
        n_trials=2, n_channels=2, n_classes=2, fs=125.0, duration_s=3.0,
        sources=[[SourceSpec(10.17, 0.1, 1.0, (1.0, 0.0))],
                 [SourceSpec(20.0, 2.0, 1.0, (0.0, 1.0))]],
        seed=0)
    with pytest.raises(ValueError, match="grid"):
        synth_generate(spec)


def test_mixing_columns_are_normalized():
    src = SourceSpec(10.0, 2.0, 1.0, (3.0, 4.0))
    np.testing.assert_allclose(np.linalg.norm(src.mixing_array), 1.0, rtol=1e-12)
    np.testing.assert_allclose(src.mixing_array, [0.6, 0.8], rtol=1e-12)
