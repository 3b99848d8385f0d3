"""Wire format: exact byte layouts, strict parsing, fuzz totality."""

from __future__ import annotations

import socket
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attestsim.wire import (
    HEADER_LEN,
    MAX_PAYLOAD,
    MSG_ATTEST_REQUEST,
    AttestRequest,
    AttestResponse,
    BadLengthError,
    ChannelConfirm,
    ChannelInit,
    ErrorMsg,
    FrameStream,
    OversizeFrameError,
    TruncatedError,
    UnknownTypeError,
    WireError,
    decode,
    encode,
)


class TestFrozenLayouts:
    """Hand-assembled frames: the layout is the contract, byte for byte."""

    def test_attest_request(self):
        frame = encode(AttestRequest(pid=5, chal=bytes(range(32))))
        assert frame.hex() == (
            "00000028" "01" "0000000000000005"
            "000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f")

    def test_attest_response_hmac(self):
        frame = encode(AttestResponse(status=0, pid=5, pk=b"\xbb" * 32,
                                      sigma=b"\xcc" * 32))
        assert frame.hex() == (
            "0000004b" "02" "00" "0000000000000005"
            + "bb" * 32 + "0020" + "cc" * 32)

    def test_attest_response_error_status(self):
        frame = encode(AttestResponse(status=2, pid=9, pk=bytes(32), sigma=b""))
        assert frame.hex() == (
            "0000002b" "02" "02" "0000000000000009" + "00" * 32 + "0000")

    def test_channel_init(self):
        frame = encode(ChannelInit(eph_pk=b"\x11" * 32, nonce=b"\x22" * 12,
                                   ct=b"\x33" * 16))
        assert frame.hex() == (
            "0000003c" "03" + "11" * 32 + "22" * 12 + "33" * 16)

    def test_channel_confirm(self):
        frame = encode(ChannelConfirm(nonce=b"\x44" * 12, ct=b"\x55" * 24))
        assert frame.hex() == ("00000024" "04" + "44" * 12 + "55" * 24)

    def test_error(self):
        assert encode(ErrorMsg(code=3)).hex() == "00000001" "05" "03"

    def test_length_counts_payload_only(self):
        frame = encode(ErrorMsg(code=1))
        declared = struct.unpack(">I", frame[:4])[0]
        assert declared == len(frame) - HEADER_LEN == 1


MESSAGES = st.one_of(
    st.builds(AttestRequest,
              pid=st.integers(min_value=0, max_value=2**64 - 1),
              chal=st.binary(min_size=32, max_size=32)),
    st.builds(AttestResponse,
              status=st.integers(min_value=0, max_value=255),
              pid=st.integers(min_value=0, max_value=2**64 - 1),
              pk=st.binary(min_size=32, max_size=32),
              sigma=st.sampled_from([b"", b"\x01" * 32, b"\x02" * 64])),
    st.builds(ChannelInit,
              eph_pk=st.binary(min_size=32, max_size=32),
              nonce=st.binary(min_size=12, max_size=12),
              ct=st.binary(min_size=16, max_size=300)),
    st.builds(ChannelConfirm,
              nonce=st.binary(min_size=12, max_size=12),
              ct=st.binary(min_size=16, max_size=300)),
    st.builds(ErrorMsg, code=st.integers(min_value=0, max_value=255)),
)


class TestRoundtrip:
    @given(msg=MESSAGES)
    @settings(max_examples=400, deadline=None)
    def test_encode_decode_identity(self, msg):
        assert decode(encode(msg)) == msg

    def test_oversize_payload_refused_at_encode(self):
        with pytest.raises(OversizeFrameError):
            encode(ChannelInit(eph_pk=bytes(32), nonce=bytes(12),
                               ct=bytes(MAX_PAYLOAD)))


class TestStrictParsing:
    def test_truncated_header(self):
        with pytest.raises(TruncatedError):
            decode(b"\x00\x00")

    def test_truncated_payload(self):
        frame = encode(ErrorMsg(code=1))
        with pytest.raises(TruncatedError):
            decode(frame[:-1])

    def test_trailing_bytes(self):
        frame = encode(ErrorMsg(code=1))
        with pytest.raises(BadLengthError):
            decode(frame + b"\x00")

    def test_unknown_type(self):
        with pytest.raises(UnknownTypeError):
            decode(struct.pack(">IB", 0, 0x7F))

    def test_oversize_declared_length(self):
        with pytest.raises(BadLengthError):
            decode(struct.pack(">IB", MAX_PAYLOAD + 1, MSG_ATTEST_REQUEST)
                   + bytes(MAX_PAYLOAD + 1))

    @pytest.mark.parametrize("payload_len", [0, 39, 41])
    def test_attest_request_length_must_be_exact(self, payload_len):
        with pytest.raises(WireError):
            decode(struct.pack(">IB", payload_len, MSG_ATTEST_REQUEST)
                   + bytes(payload_len))

    def test_sigma_len_must_match_remaining(self):
        # sigma_len says 64 but only 32 bytes follow
        payload = struct.pack(">BQ", 0, 1) + bytes(32) + struct.pack(">H", 64) + bytes(32)
        frame = struct.pack(">IB", len(payload), 0x02) + payload
        with pytest.raises(BadLengthError):
            decode(frame)

    def test_sigma_len_odd_value_rejected(self):
        payload = struct.pack(">BQ", 0, 1) + bytes(32) + struct.pack(">H", 48) + bytes(48)
        frame = struct.pack(">IB", len(payload), 0x02) + payload
        with pytest.raises(BadLengthError):
            decode(frame)

    def test_channel_ct_must_cover_a_tag(self):
        payload = bytes(32) + bytes(12) + bytes(15)
        frame = struct.pack(">IB", len(payload), 0x03) + payload
        with pytest.raises(TruncatedError):
            decode(frame)

    @given(blob=st.binary(max_size=256))
    @settings(max_examples=500, deadline=None)
    def test_decode_is_total(self, blob):
        """Arbitrary bytes either parse or raise a WireError; nothing else."""
        try:
            msg = decode(blob)
        except WireError:
            return
        assert decode(encode(msg)) == msg

    @given(header=st.binary(min_size=5, max_size=5), body=st.binary(max_size=64))
    @settings(max_examples=300, deadline=None)
    def test_decode_total_with_plausible_headers(self, header, body):
        try:
            decode(header + body)
        except WireError:
            pass


class TestFrameStream:
    def _pair(self):
        a, b = socket.socketpair()
        return FrameStream(a), FrameStream(b)

    def test_send_recv_roundtrip(self):
        left, right = self._pair()
        try:
            msg = AttestRequest(pid=3, chal=bytes(32))
            left.send(msg)
            assert right.recv() == msg
        finally:
            left.close()
            right.close()

    def test_clean_eof(self):
        left, right = self._pair()
        left.close()
        try:
            assert right.recv(allow_eof=True) is None
            with pytest.raises(TruncatedError):
                right.recv()
        finally:
            right.close()

    def test_eof_mid_frame(self):
        left, right = self._pair()
        left.send_raw(struct.pack(">IB", 40, 0x01) + bytes(10))
        left.close()
        try:
            with pytest.raises(TruncatedError):
                right.recv()
        finally:
            right.close()

    def test_oversize_declaration(self):
        left, right = self._pair()
        left.send_raw(struct.pack(">IB", MAX_PAYLOAD + 9, 0x01))
        try:
            with pytest.raises(BadLengthError):
                right.recv()
        finally:
            left.close()
            right.close()
