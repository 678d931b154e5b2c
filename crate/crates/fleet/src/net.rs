//! LF-framed envelope I/O over async byte streams.

use std::io;

use fleet_core::protocol::{decode_envelope, encode_envelope, Envelope, ProtocolError};
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, BufReader};

/// Upper bound on a single line; longer lines are discarded.
pub const MAX_LINE_BYTES: usize = 4 << 20;

pub struct EnvelopeReader<R> {
    inner: BufReader<R>,
    buf: Vec<u8>,
}

impl<R: AsyncRead + Unpin> EnvelopeReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner: BufReader::new(inner),
            buf: Vec::with_capacity(1024),
        }
    }

    /// Next envelope, `Ok(None)` at end of stream. Decode failures are
    /// returned per line and leave the stream usable.
    pub async fn next(&mut self) -> io::Result<Option<Result<Envelope, ProtocolError>>> {
        loop {
            self.buf.clear();
            let n = (&mut self.inner)
                .take(MAX_LINE_BYTES as u64 + 1)
                .read_until(b'\n', &mut self.buf)
                .await?;
            if n == 0 {
                return Ok(None);
            }
            if self.buf.last() != Some(&b'\n') {
                if self.buf.len() > MAX_LINE_BYTES {
                    // drain the rest of the oversized line
                    let mut sink = Vec::new();
                    self.inner.read_until(b'\n', &mut sink).await?;
                    return Ok(Some(Err(ProtocolError::validation(
                        "envelope",
                        format!("line exceeds {MAX_LINE_BYTES} bytes"),
                    ))));
                }
                // EOF in the middle of a line
                return Ok(Some(decode_envelope(&self.buf)));
            }
            if self.buf.iter().all(|b| b.is_ascii_whitespace()) {
                continue;
            }
            return Ok(Some(decode_envelope(&self.buf)));
        }
    }
}

pub async fn write_envelope<W: AsyncWrite + Unpin>(w: &mut W, env: &Envelope) -> io::Result<()> {
    let line = encode_envelope(env).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    w.write_all(&line).await?;
    w.flush().await
}

#[cfg(test)]
mod tests {
    use super::*;
    use fleet_core::protocol::{Heartbeat, Payload};

    #[tokio::test]
    async fn bad_lines_do_not_end_the_stream() {
        let good =
            encode_envelope(&Envelope::new("c", 1, Payload::Heartbeat(Heartbeat {}))).unwrap();
        let mut input = b"{not json\n\n".to_vec();
        input.extend_from_slice(&good);
        input.extend_from_slice(b"{\"msg_type\":\"HEART");
        let mut r = EnvelopeReader::new(&input[..]);
        assert!(r.next().await.unwrap().unwrap().is_err());
        assert_eq!(r.next().await.unwrap().unwrap().unwrap().seq, 1);
        assert!(matches!(
            r.next().await.unwrap().unwrap(),
            Err(ProtocolError::Parse(_))
        ));
        assert!(r.next().await.unwrap().is_none());
    }
}
