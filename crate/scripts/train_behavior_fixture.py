"""Train the small CNN-LSTM behavior fixture on synthetic sinusoid windows and
write it as a HERD weight file.

The generator mirrors `behavior::synthetic_series` (same per-class frequency,
amplitude, jitter, phase and noise) with numpy's RNG instead of ChaCha8.

    python3 scripts/train_behavior_fixture.py crates/core/tests/fixtures/behavior_cnn_lstm.herd
"""

import struct
import sys

import numpy as np
import torch
from torch import nn

FAMILIES = [(0.3, 0.05), (0.8, 0.4), (1.5, 1.0), (2.5, 0.6), (4.0, 0.3)]
NOISE = 0.05
RATE = 25.0
WINDOW = 100
CONV = [8, 16, 16]
KERNEL = 5
HIDDEN = 24
LSTM_LAYERS = 4
CLASSES = 5
DROPOUT = 0.2


def windows(per_class, rng):
    xs, ys = [], []
    k = np.arange(WINDOW, dtype=np.float64)
    for label, (freq, amp) in enumerate(FAMILIES):
        for _ in range(per_class):
            f = freq * (1.0 + rng.uniform(-0.05, 0.05))
            phi = rng.uniform(0.0, 2 * np.pi)
            theta = 2 * np.pi * f * k / RATE + phi
            ax = amp * np.sin(theta)
            ay = amp / 2 * np.cos(theta)
            az = 1.0 + amp / 4 * np.sin(2 * theta)
            x = np.stack([ax, ay, az], axis=1) + rng.normal(0.0, NOISE, size=(WINDOW, 3))
            xs.append(x)
            ys.append(label)
    return torch.tensor(np.array(xs), dtype=torch.float32), torch.tensor(ys)


class CnnLstm(nn.Module):
    def __init__(self):
        super().__init__()
        convs, ch = [], 3
        for out in CONV:
            convs.append(nn.Conv1d(ch, out, KERNEL, padding=KERNEL // 2))
            ch = out
        self.convs = nn.ModuleList(convs)
        self.drop = nn.Dropout(DROPOUT)
        self.lstms = nn.ModuleList(
            [nn.LSTM(ch if i == 0 else HIDDEN, HIDDEN, batch_first=True) for i in range(LSTM_LAYERS)]
        )
        self.fc = nn.Linear(HIDDEN, CLASSES)

    def forward(self, x):
        x = x.transpose(1, 2)
        for conv in self.convs:
            x = self.drop(nn.functional.max_pool1d(torch.relu(conv(x)), 2))
        x = x.transpose(1, 2)
        for lstm in self.lstms:
            x, _ = lstm(x)
        return self.fc(x[:, -1, :])


def f32s(t):
    a = t.detach().numpy().astype("<f4").ravel()
    return a.tobytes()


def encode(model):
    out = bytearray(b"HERD")
    layers = []

    def layer(tag, params, tensors=()):
        rec = bytearray([tag, 1])
        rec += struct.pack("<H", len(layers))
        rec += b"".join(struct.pack("<I", p) for p in params)
        rec += b"".join(tensors)
        rec.append(0)
        layers.append(bytes(rec))

    ch = 3
    for conv, out_ch in zip(model.convs, CONV):
        w = conv.weight.permute(0, 2, 1)  # [out, in, k] -> [out, k, in]
        layer(4, [KERNEL, 1, KERNEL // 2, ch, out_ch], [f32s(w), f32s(conv.bias)])
        layer(6, [])
        layer(9, [2, 2])
        layer(12, [struct.unpack("<I", struct.pack("<f", DROPOUT))[0]])
        ch = out_ch
    for i, lstm in enumerate(model.lstms):
        seq = 1 if i + 1 < LSTM_LAYERS else 0
        bias = lstm.bias_ih_l0 + lstm.bias_hh_l0
        layer(11, [ch, HIDDEN, seq], [f32s(lstm.weight_ih_l0), f32s(lstm.weight_hh_l0), f32s(bias)])
        ch = HIDDEN
    layer(5, [HIDDEN, CLASSES], [f32s(model.fc.weight), f32s(model.fc.bias)])
    layer(10, [])

    out += struct.pack("<HH", 1, len(layers))
    out += struct.pack("<B", 2) + struct.pack("<II", WINDOW, 3)
    out.append(0)
    for rec in layers:
        out += rec
    return bytes(out)


def main():
    path = sys.argv[1]
    torch.manual_seed(7)
    rng = np.random.default_rng(7)
    x, y = windows(400, rng)
    x_val, y_val = windows(100, rng)
    model = CnnLstm()
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    for epoch in range(200):
        model.train()
        perm = torch.randperm(len(x))
        for i in range(0, len(x), 64):
            idx = perm[i : i + 64]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
        model.eval()
        with torch.no_grad():
            acc = (model(x_val).argmax(1) == y_val).float().mean().item()
            pred = model(x_val).argmax(1)
        print(f"epoch {epoch} loss {loss.item():.4f} val acc {acc:.4f} per class", [round((pred[y_val == c] == c).float().mean().item(), 2) for c in range(CLASSES)])
        if acc >= 0.995 and epoch >= 10:
            break
    with open(path, "wb") as f:
        f.write(encode(model))


if __name__ == "__main__":
    main()
