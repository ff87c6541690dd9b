"""Content-aware chunk weighting for adaptive video streaming.

Modules: ``model`` (records and metrics), ``rater`` (oracle clients),
``perception`` (windowed rating), ``ranking`` (merge-sort re-ranking and
smoothing), ``forecast`` (weight forecasters), ``live`` (event-driven
scheduler), ``abr`` (bitrate simulator) and ``cli``.
"""
__version__ = "0.1.0"
