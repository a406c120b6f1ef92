"""Expression-driven Gaussian head avatars for low-bitrate video conferencing.

Sender side: per-frame expression/pose parameters are quantized and coded
with closed-loop prediction and Exp-Golomb codes. Receiver side: the decoded
parameters drive a blendshape head, an offset network moves UV-anchored 3D
Gaussians, and a CPU rasterizer renders the frame. The avatar itself ships
once, compressed into a compact container.
"""

__version__ = "0.1.0"
