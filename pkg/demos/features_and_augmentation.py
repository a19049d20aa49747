"""Log-mel features and the augmentation pipeline on a synthetic chirp.

Run: python3 demos/features_and_augmentation.py
"""

import numpy as np

from aedkit.audio import AudioClip, FeatureConfig, log_mel
from aedkit.augment import MULTI_LABEL, AugmentSpec, LabeledExample, augment_spectrogram, augment_waveform

sr = 16000
t = np.arange(5 * sr) / sr
chirp = AudioClip(0.3 * np.sin(2 * np.pi * (300 + 150 * t) * t), sr)
hum = AudioClip(0.2 * np.sin(2 * np.pi * 120 * t), sr)

features = FeatureConfig()
mel = log_mel(chirp, features)
print("log-mel shape:", mel.shape)  # (80, 498) for 5 s at a 10 ms hop
print("loudest band per second:", mel.values[:, ::100].argmax(axis=0))

spec = AugmentSpec.default(MULTI_LABEL)
ex = LabeledExample(chirp, np.array([1.0, 0.0, 0.0]))
partner = LabeledExample(hum, np.array([0.0, 0.0, 1.0]))

for seed in range(4):
    log = []
    wave = augment_waveform(ex, spec, seed, MULTI_LABEL, mix_partner=partner, log=log)
    wave = LabeledExample(log_mel(wave.payload, features), wave.labels)
    out = augment_spectrogram(wave, spec, seed, MULTI_LABEL, log=log)
    fired = [entry["transform"] for entry in log]
    print(f"seed {seed}: labels {out.labels} negative={out.is_negative} transforms {fired}")
