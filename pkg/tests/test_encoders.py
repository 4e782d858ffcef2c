import itertools

import numpy as np
import pytest
import torch

from soundit.encoders import (SCENE_VOCABULARY, DownsampleCodec, ToySceneEncoder,
                              ToySoundscapeEncoder, log_mel, mel_filterbank, psnr, read_image,
                              read_wav, seeded_rng, train_codec, write_png, write_wav)
from soundit.synthetic import landscape, soundscape


def smooth_images(n=6, size=32):
    return [landscape(i, i, size, seed=3) for i in range(n)]


class TestCodec:
    def test_downsample_psnr_on_smooth_images(self):
        codec = DownsampleCodec(32, 4)
        for img in smooth_images():
            z = codec.encode(img)
            assert z.shape == (3, 8, 8)
            assert float(z.min()) >= -1 and float(z.max()) <= 1
            assert psnr(img, codec.decode(z)) > 20

    def test_downsample_is_blockwise_mean(self):
        img = np.zeros((8, 8, 3), np.uint8)
        img[:4, :4] = 255
        img[0, 4] = 255
        z = DownsampleCodec(8, 4).encode(img)
        # top-left block all white, top-right block one white pixel out of 16
        assert z[:, 0, 0].tolist() == [1.0, 1.0, 1.0]
        np.testing.assert_allclose(z[:, 0, 1].numpy(), 2 * (1 / 16) - 1, rtol=1e-6)

    def test_constant_image_roundtrips_exactly(self):
        img = np.full((32, 32, 3), 77, np.uint8)
        codec = DownsampleCodec()
        assert np.array_equal(codec.decode(codec.encode(img)), img)

    def test_rejects_bad_factor(self):
        with pytest.raises(ValueError):
            DownsampleCodec(30, 4)

    @pytest.mark.slow
    def test_trained_autoencoder_reconstructs(self):
        images = smooth_images(8)
        codec = train_codec(images, steps=300, seed=0)
        assert codec.encode(images[0]).shape == codec.latent_shape
        assert np.mean([psnr(im, codec.decode(codec.encode(im))) for im in images]) > 20


class TestSoundscapeEncoder:
    def test_shapes_and_determinism(self):
        enc = ToySoundscapeEncoder(summary_dim=12, token_dim=6, num_tokens=5)
        wave = soundscape(2.0, 1, seed=0)
        e_s, tokens = enc.encode(wave)
        assert e_s.shape == (12,) and tokens.shape == (5, 6)
        assert abs(float(e_s.norm()) - 1) < 1e-6
        e2, t2 = ToySoundscapeEncoder(summary_dim=12, token_dim=6, num_tokens=5).encode(wave)
        assert torch.equal(e_s, e2) and torch.equal(tokens, t2)

    def test_distinguishes_scenes(self):
        enc = ToySoundscapeEncoder()
        a, _ = enc.encode(soundscape(2.0, 0, seed=0))
        b, _ = enc.encode(soundscape(2.0, 5, seed=0))
        assert float(a @ b) < 0.99

    def test_short_input_is_padded(self):
        e_s, tokens = ToySoundscapeEncoder().encode(np.zeros(100))
        assert torch.all(torch.isfinite(e_s)) and torch.all(torch.isfinite(tokens))

    def test_mel_filters_cover_band(self):
        fb = mel_filterbank(16, 512, 16000)
        assert fb.shape == (16, 257)
        assert np.all(fb >= 0) and np.all(fb <= 1)
        assert np.all(fb.max(axis=1) > 0.5)

    def test_log_mel_peak_tracks_tone(self):
        t = np.arange(16000) / 16000
        low = log_mel(np.sin(2 * np.pi * 300 * t)).mean(0).argmax()
        high = log_mel(np.sin(2 * np.pi * 3000 * t)).mean(0).argmax()
        assert low < high


class TestSceneEncoder:
    def test_distinct_words_are_distinct(self):
        enc = ToySceneEncoder()
        vecs = {w: enc.encode(w) for w in SCENE_VOCABULARY}
        for a, b in itertools.combinations(SCENE_VOCABULARY, 2):
            assert float(vecs[a] @ vecs[b]) < 0.99, (a, b)

    def test_vocabulary_miss_is_none(self):
        enc = ToySceneEncoder()
        assert enc.encode("spaceship interior") is None
        assert enc.encode("") is None
        assert enc.encode(None) is None

    def test_prompt_mixes_known_words(self):
        enc = ToySceneEncoder(scene_dim=8)
        v = enc.encode("Residential Neighborhood, with a unicorn")
        expected = (enc.table["residential"] + enc.table["neighborhood"]) / 2
        np.testing.assert_allclose(v.numpy(), expected / np.linalg.norm(expected), rtol=1e-6)

    def test_seed_changes_table(self):
        assert not torch.equal(ToySceneEncoder(seed=0).encode("park"), ToySceneEncoder(seed=1).encode("park"))


class TestIO:
    def test_wav_roundtrip(self, tmp_path):
        wave = 0.5 * np.sin(np.linspace(0, 100, 4000))
        write_wav(tmp_path / "a.wav", wave, 8000)
        back, sr = read_wav(tmp_path / "a.wav")
        assert sr == 8000
        assert np.max(np.abs(back - wave)) < 1e-4

    def test_png_roundtrip(self, tmp_path):
        img = landscape(2, 0, 16)
        write_png(tmp_path / "a.png", img)
        assert np.array_equal(read_image(tmp_path / "a.png"), img)

    def test_seeded_rng_is_keyed(self):
        assert seeded_rng("a", 1).integers(1 << 30) == seeded_rng("a", 1).integers(1 << 30)
        assert seeded_rng("a", 1).integers(1 << 30) != seeded_rng("a", 2).integers(1 << 30)
