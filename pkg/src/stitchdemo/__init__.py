"""Stitch video demonstrations for multistep procedures from several source videos.

Everything runs on precomputed embeddings: step localization in videos,
query-to-clip mapping, set-cover candidate search, a transformer evaluator
trained on hard negatives, and a retrieval benchmark.
"""
__version__ = "0.1.0"
