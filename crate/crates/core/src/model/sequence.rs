use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Video,
    Text,
}

/// Embedded tokens in video-first layout: `M` video rows, then `N ≥ 1` text
/// rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    embeddings: Tensor,
    n_video: usize,
}

impl TokenSequence {
    pub fn new(embeddings: Tensor, roles: &[Role]) -> Result<Self> {
        let (rows, _) = embeddings.dims2()?;
        if roles.len() != rows {
            return Err(Error::dim("token_sequence", format!("{} roles for {rows} rows", roles.len())));
        }
        let n_video = roles.iter().take_while(|r| **r == Role::Video).count();
        if roles[n_video..].iter().any(|r| *r == Role::Video) {
            return Err(Error::contract("video tokens must precede all text tokens"));
        }
        if n_video == rows {
            return Err(Error::contract("a sequence needs at least one text token"));
        }
        Ok(Self { embeddings, n_video })
    }

    pub fn from_parts(video: &Tensor, text: &Tensor) -> Result<Self> {
        let joined = Tensor::concat_rows(&[video, text])?;
        let mut roles = vec![Role::Video; video.rows()];
        roles.resize(joined.rows(), Role::Text);
        Self::new(joined, &roles)
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn roles(&self) -> Vec<Role> {
        let mut r = vec![Role::Video; self.n_video];
        r.resize(self.len(), Role::Text);
        r
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_video(&self) -> usize {
        self.n_video
    }

    pub fn n_text(&self) -> usize {
        self.len() - self.n_video
    }

    pub fn d(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn video(&self) -> Tensor {
        self.embeddings.slice_rows(0, self.n_video).expect("in range")
    }

    pub fn text(&self) -> Tensor {
        self.embeddings.slice_rows(self.n_video, self.n_text()).expect("in range")
    }
}

/// Model input before embedding: continuous video vectors and text ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub video: Tensor,
    pub text: Vec<usize>,
}

impl Prompt {
    pub fn new(video: Tensor, text: Vec<usize>) -> Result<Self> {
        video.dims2()?;
        if text.is_empty() {
            return Err(Error::contract("a prompt needs at least one text token"));
        }
        Ok(Self { video, text })
    }

    pub fn n_video(&self) -> usize {
        self.video.rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_rules() {
        let e = Tensor::zeros(vec![4, 2]);
        use Role::*;
        let s = TokenSequence::new(e.clone(), &[Video, Video, Text, Text]).unwrap();
        assert_eq!((s.n_video(), s.n_text()), (2, 2));
        assert!(TokenSequence::new(e.clone(), &[Video, Text, Video, Text]).is_err());
        assert!(TokenSequence::new(e.clone(), &[Video; 4]).is_err());
        assert!(TokenSequence::new(e, &[Text; 3]).is_err());
        let s = TokenSequence::from_parts(&Tensor::zeros(vec![0, 2]), &Tensor::ones(vec![3, 2])).unwrap();
        assert_eq!((s.n_video(), s.n_text()), (0, 3));
    }
}
