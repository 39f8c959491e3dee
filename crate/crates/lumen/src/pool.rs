//! History pool of generated images used to stabilize discriminator updates.

use crate::rng::SeededStream;
use ndarray::ArrayD;
use rand::Rng;

/// Buffer of past fake images. While filling, every query returns its input.
/// Once full, a query returns the new image or (with probability 1/2) swaps
/// it for a uniformly drawn stored one.
#[derive(Clone, Debug)]
pub struct ImagePool {
    capacity: usize,
    buffer: Vec<ArrayD<f32>>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        ImagePool {
            capacity,
            buffer: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Exchange `image` against the pool; deterministic given stream state.
    pub fn query(&mut self, stream: &mut SeededStream, image: ArrayD<f32>) -> ArrayD<f32> {
        if self.capacity == 0 {
            return image;
        }
        if self.buffer.len() < self.capacity {
            self.buffer.push(image.clone());
            return image;
        }
        // One uniform draw decides both the coin flip and the slot, keeping
        // the stream advance rate constant at one word per query.
        let r = stream.rng.gen_range(0..2 * self.capacity);
        if r < self.capacity {
            image
        } else {
            let idx = r - self.capacity;
            std::mem::replace(&mut self.buffer[idx], image)
        }
    }

    /// Stored images, for checkpoint serialization.
    pub fn buffer(&self) -> &[ArrayD<f32>] {
        &self.buffer
    }

    pub fn restore(capacity: usize, buffer: Vec<ArrayD<f32>>) -> Self {
        ImagePool { capacity, buffer }
    }
}
