use std::io::{self, Read, Write};

use super::{decode_frame, encode_frame, DecodeError, EncodeError, Frame, LinkKind};

/// Upper bound on a frame body accepted from a socket.
pub const MAX_FRAME_BODY: usize = 256 << 20;

#[derive(Debug, thiserror::Error)]
pub enum FrameIoError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("opcode {0:?} not allowed on {1:?} link")]
    WrongLink(super::Opcode, LinkKind),
}

pub fn write_frame<W: Write>(w: &mut W, f: &Frame) -> Result<(), FrameIoError> {
    let bytes = encode_frame(f)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` means the peer closed the stream cleanly on
/// a frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, FrameIoError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(prefix) as usize;
    if len > MAX_FRAME_BODY {
        return Err(DecodeError::Protocol(format!("frame body of {len} bytes exceeds limit")).into());
    }
    let mut buf = vec![0u8; 4 + len];
    buf[..4].copy_from_slice(&prefix);
    r.read_exact(&mut buf[4..])?;
    let (frame, _) = decode_frame(&buf)?;
    Ok(Some(frame))
}

/// Like [`read_frame`] but rejects opcodes outside the link's subset.
pub fn read_frame_on<R: Read>(r: &mut R, link: LinkKind) -> Result<Option<Frame>, FrameIoError> {
    match read_frame(r)? {
        Some(f) if !link.accepts(f.opcode()) => Err(FrameIoError::WrongLink(f.opcode(), link)),
        other => Ok(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn stream_roundtrip_and_clean_eof() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Frame::Ping).unwrap();
        write_frame(&mut buf, &Frame::CkptNow).unwrap();
        let mut c = Cursor::new(buf);
        assert_eq!(read_frame(&mut c).unwrap(), Some(Frame::Ping));
        assert_eq!(read_frame(&mut c).unwrap(), Some(Frame::CkptNow));
        assert_eq!(read_frame(&mut c).unwrap(), None);
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let bytes = encode_frame(&Frame::CkptNow).unwrap();
        let mut c = Cursor::new(bytes[..3].to_vec());
        assert!(read_frame(&mut c).is_err());
    }

    #[test]
    fn wrong_link_rejected() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Frame::Finalize).unwrap();
        let err = read_frame_on(&mut Cursor::new(buf), LinkKind::Peer).unwrap_err();
        assert!(matches!(err, FrameIoError::WrongLink(..)));
    }
}
