//! Data-parallel map helpers. With the `parallel` feature (default) the
//! work is spread over the rayon pool; without it the same call runs
//! sequentially. Output order always matches input order.

#[cfg(feature = "parallel")]
pub fn maybe_par_map<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Send + Sync,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn maybe_par_map<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Send + Sync,
{
    items.into_iter().map(f).collect()
}

/// Always-sequential twin of [`maybe_par_map`], kept callable regardless of
/// features so benches can compare both paths in one build.
pub fn seq_map<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    F: Fn(I) -> O,
{
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<usize> = (0..100).collect();
        let doubled = maybe_par_map(v.clone(), |x| 2 * x);
        let seq = seq_map(v, |x| 2 * x);
        assert_eq!(doubled, seq);
        assert_eq!(doubled[3], 6);
    }
}
