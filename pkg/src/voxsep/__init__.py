"""voxsep: joint singing-voice separation and detection toolkit.

Subsystems: ``dsp`` (audio/STFT), ``diffcore`` (differentiable ops and Adam),
``model`` (masking U-Net with separation and detection heads), ``loss``
(joint objectives), ``data`` (corpora, sampling strategies, synthesis),
``evaluation`` (BSS metrics, ROC statistics, the silent-source SDR audit),
``bias`` (dataset profiling) and ``cli``/``training`` (orchestration).
"""

__version__ = "0.1.0"
