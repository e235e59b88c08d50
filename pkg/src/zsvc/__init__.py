"""Zero-shot singing voice conversion at desk scale.

Content features (optionally k-means or RVQ compressed), a pitch track and a
speaker embedding drive a flow-based conditional generator trained
adversarially. Inference can average the reference embedding with its
nearest neighbours in a speaker database.
"""

__version__ = "0.1.0"
