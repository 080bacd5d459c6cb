"""Toolkit for probing the layers of a conv/recurrent CTC speech model.

Pipeline: synthesize (or import) a frame-labelled corpus, train a small
DeepSpeech2-style network with CTC, tap every layer's per-frame output,
then measure how much phone information each tap carries via probing
classifiers, clustering, and confusion analysis.
"""

__version__ = "0.1.0"
