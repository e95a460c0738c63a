"""
DVA Retrieval - frozen-encoder adaptation for fine-grained image retrieval
"""

__version__ = "1.0.0"
