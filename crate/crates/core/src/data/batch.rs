//! Right-padding of feature and caption sequences into fixed-length batches.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::vocab::PAD;

#[derive(Debug, Clone)]
pub struct BatchItem {
    pub video_id: String,
    pub audio: Tensor,
    pub visual: Tensor,
    /// Caption ids including start and end markers.
    pub tokens: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct PaddedItem {
    pub video_id: String,
    pub audio: Tensor,
    pub visual: Tensor,
    pub audio_mask: Vec<bool>,
    pub visual_mask: Vec<bool>,
    pub tokens: Vec<usize>,
    pub token_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub items: Vec<PaddedItem>,
    pub audio_len: usize,
    pub visual_len: usize,
    pub caption_len: usize,
}

/// Pads every item to `pad_to = (audio rows, visual rows)`, or to the batch maximum
/// when `pad_to` is `None`. Captions are padded with the pad token to the longest one.
pub fn make_batch(items: &[BatchItem], pad_to: Option<(usize, usize)>) -> Result<PaddedBatch> {
    if items.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let rows = |t: &Tensor| t.shape()[0];
    let (audio_len, visual_len) = match pad_to {
        Some(p) => p,
        None => (
            items.iter().map(|i| rows(&i.audio)).max().unwrap_or(0),
            items.iter().map(|i| rows(&i.visual)).max().unwrap_or(0),
        ),
    };
    let caption_len = items
        .iter()
        .filter_map(|i| i.tokens.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);

    let mut out = Vec::with_capacity(items.len());
    for item in items {
        item.audio.dims2()?;
        item.visual.dims2()?;
        let (ta, tv) = (rows(&item.audio), rows(&item.visual));
        if ta > audio_len || tv > visual_len {
            return Err(Error::data(format!(
                "video {:?} has {ta} audio / {tv} visual rows, limit is {audio_len} / {visual_len}",
                item.video_id
            )));
        }
        let (tokens, token_mask) = match &item.tokens {
            Some(ids) => {
                let mut t = ids.clone();
                t.resize(caption_len, PAD);
                let m = (0..caption_len).map(|i| i < ids.len()).collect();
                (t, m)
            }
            None => (Vec::new(), Vec::new()),
        };
        out.push(PaddedItem {
            video_id: item.video_id.clone(),
            audio: item.audio.pad_rows(audio_len)?,
            visual: item.visual.pad_rows(visual_len)?,
            audio_mask: (0..audio_len).map(|i| i < ta).collect(),
            visual_mask: (0..visual_len).map(|i| i < tv).collect(),
            tokens,
            token_mask,
        });
    }
    Ok(PaddedBatch {
        items: out,
        audio_len,
        visual_len,
        caption_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, ta: usize, tv: usize, caption: Option<Vec<usize>>) -> BatchItem {
        BatchItem {
            video_id: id.into(),
            audio: Tensor::full(&[ta, 3], 1.0),
            visual: Tensor::full(&[tv, 2], 2.0),
            tokens: caption,
        }
    }

    #[test]
    fn mask_marks_exactly_the_real_rows() {
        let b = make_batch(&[item("v", 3, 2, None)], Some((5, 4))).unwrap();
        let p = &b.items[0];
        assert_eq!(p.audio_mask, [true, true, true, false, false]);
        assert_eq!(p.visual_mask, [true, true, false, false]);
        assert_eq!(p.audio.shape(), &[5, 3]);
        assert!(p.audio.data()[9..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn full_size_limits_accept_long_videos() {
        assert!(make_batch(&[item("v", 800, 300, None)], Some((800, 300))).is_ok());
    }

    #[test]
    fn over_length_names_the_video() {
        let err = make_batch(&[item("v_long", 9, 2, None)], Some((8, 4))).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("v_long")), "{err}");
    }

    #[test]
    fn captions_pad_with_the_pad_token() {
        let b = make_batch(
            &[item("a", 2, 1, Some(vec![2, 7, 3])), item("b", 4, 1, Some(vec![2, 3]))],
            None,
        )
        .unwrap();
        assert_eq!(b.audio_len, 4);
        assert_eq!(b.items[1].tokens, [2, 3, PAD]);
        assert_eq!(b.items[1].token_mask, [true, true, false]);
    }
}
