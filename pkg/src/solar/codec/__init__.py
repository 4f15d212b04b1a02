from .bitstream import (Bitstream, CodecState, FormatError, FrameRecord, decode_frame,
                        encode_iframe, encode_pframe, estimate_gap, measure_rate)
from .rangecoder import BernoulliModel, CodecError, CRCError, arith_decode, arith_encode

__all__ = [
    "Bitstream", "CodecState", "FormatError", "FrameRecord", "decode_frame", "encode_iframe",
    "encode_pframe", "estimate_gap", "measure_rate", "BernoulliModel", "CodecError", "CRCError",
    "arith_decode", "arith_encode",
]
