mod support;

use support::checks;

fn pass(r: checks::Check) {
    match r {
        Ok(s) => println!("{s}"),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn convolution_matches_direct_summation() {
    pass(checks::convolution(11));
}

#[test]
fn pooling_matches_reductions() {
    pass(checks::pooling(12));
}

#[test]
fn roi_boxes_match_membership_scan() {
    pass(checks::roi_boxes(13));
}

#[test]
fn scatter_and_gather_match_means() {
    pass(checks::scatter_gather(14));
}

#[test]
fn completion_metrics_match_set_counts() {
    pass(checks::metrics(15));
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    pass(checks::cross_entropy(16));
}
