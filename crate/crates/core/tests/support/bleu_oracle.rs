//! Brute-force sentence BLEU and Self-BLEU. Written without the library's
//! hashing or log-space arithmetic: n-grams are owned vectors compared by
//! linear scan and precisions are multiplied directly.

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        out.push(tokens[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn occurrences(list: &[Vec<String>], gram: &[String]) -> usize {
    list.iter().filter(|g| g.as_slice() == gram).count()
}

pub fn bleu(hyp: &[String], refs: &[Vec<String>], max_n: usize) -> f64 {
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let orders = max_n.min(hyp.len());
    let mut product = 1.0f64;
    for n in 1..=orders {
        let hyp_grams = ngrams(hyp, n);
        let ref_grams: Vec<Vec<Vec<String>>> = refs.iter().map(|r| ngrams(r, n)).collect();
        let mut seen: Vec<&Vec<String>> = Vec::new();
        let mut matched = 0usize;
        for g in &hyp_grams {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let in_hyp = occurrences(&hyp_grams, g);
            let mut best = 0;
            for rg in &ref_grams {
                best = best.max(occurrences(rg, g));
            }
            matched += in_hyp.min(best);
        }
        let total = hyp_grams.len();
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        product *= p;
    }
    let c = hyp.len();
    let mut r = refs[0].len();
    for reference in refs {
        let len = reference.len();
        let (d, best) = (len.abs_diff(c), r.abs_diff(c));
        if d < best || (d == best && len < r) {
            r = len;
        }
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * product.powf(1.0 / orders as f64)
}

pub fn self_bleu(samples: &[String], max_n: usize) -> f64 {
    let tokens: Vec<Vec<String>> = samples
        .iter()
        .map(|s| s.split_whitespace().map(str::to_string).collect())
        .collect();
    let mut sum = 0.0;
    for i in 0..tokens.len() {
        let refs: Vec<Vec<String>> = (0..tokens.len()).filter(|&j| j != i).map(|j| tokens[j].clone()).collect();
        sum += bleu(&tokens[i], &refs, max_n);
    }
    100.0 * sum / tokens.len() as f64
}
