# # Sparse ternary compression
#
# Every message in the federation is squeezed through one codec: keep the
# k = floor(d q) entries of largest magnitude, replace each by +mu or -mu
# where mu is their mean magnitude, and drop the rest. What the codec throws
# away is not lost; the sender keeps it as a residual and adds it to the next
# message.

import numpy as np

from elasticfl.compress import decode, encoded_bits, residual, st_compress, to_wire

rng = np.random.default_rng(0)

# A small vector first, so the output can be read by eye.

delta = np.array([0.3, -1.2, 0.05, 2.0, -0.4, 0.9, 0.0, -0.1])
msg = st_compress(delta, q=0.25)
print("kept +:", msg.pos_indices, " kept -:", msg.neg_indices, " mu =", msg.mu)
print("decoded :", decode(msg))
print("residual:", residual(delta, msg))

# Decoding plus the residual gives back the input exactly, which is what makes
# error feedback lossless in the long run.

assert np.allclose(decode(msg) + residual(delta, msg), delta)

# ## Error feedback over many rounds
#
# Send the same drifting signal for 200 rounds, once with a residual and once
# without. The running sum of what arrives tracks the true running sum only
# when the residual is fed back.

d, q = 1000, 0.01
drift = rng.normal(size=d) * np.linspace(0.01, 1, d)
R = np.zeros(d)
sent_fb, sent_plain, truth = np.zeros(d), np.zeros(d), np.zeros(d)
for t in range(200):
    g = drift + 0.1 * rng.normal(size=d)
    truth += g
    m = st_compress(R + g, q)
    R = residual(R + g, m)
    sent_fb += decode(m)
    sent_plain += decode(st_compress(g, q))

rel = lambda x: np.linalg.norm(x - truth) / np.linalg.norm(truth)
print(f"relative error with feedback   : {rel(sent_fb):.3f}")
print(f"relative error without feedback: {rel(sent_plain):.3f}")

# ## What a message costs
#
# The idealized count is a 64-bit mu, a 32-bit length, and per kept entry an
# index plus a sign bit. For a softmax model on MNIST (d = 7850) at q = 0.05
# that is a small fraction of the dense 64-bit upload.

d = 7850
m = st_compress(rng.normal(size=d), 0.05)
print(f"encoded bits {encoded_bits(m)} vs dense {64 * d} ({encoded_bits(m) / (64 * d):.1%})")
print(f"wire bytes   {len(to_wire(m))}")
