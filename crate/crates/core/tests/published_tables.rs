use ticketlab::evaluation::{gap_analysis, Hundredths, Subgroup, SubgroupReport, TpTable};

const TABLE1: &str = include_str!("fixtures/table1.csv");
const TABLE2: &str = include_str!("fixtures/table2.csv");

#[test]
fn subgroup_table_ingests() {
    let r = SubgroupReport::from_csv(TABLE1).unwrap();
    assert_eq!(r.levels, (0..10).collect::<Vec<_>>());
    assert_eq!(r.cell(Subgroup::Male, 0), Some(Hundredths(5449)));
    assert_eq!(r.cell(Subgroup::Ages1To30, 1), Some(Hundredths(6350)));
    assert_eq!(r.cell(Subgroup::Ages1To30, 7), Some(Hundredths(6600)));
}

#[test]
fn gaps_of_published_table() {
    let gaps = gap_analysis(&SubgroupReport::from_csv(TABLE1).unwrap()).unwrap();
    assert_eq!(gaps.female_minus_male_at(0).unwrap().to_string(), "1.59");
    assert_eq!(gaps.female_minus_male_at(9).unwrap().to_string(), "3.90");
    assert_eq!(gaps.young_minus_old_at(0).unwrap().to_string(), "24.96");
    assert_eq!(gaps.young_minus_old_at(9).unwrap().to_string(), "16.48");
    assert_eq!(gaps.female_minus_male_change, Some(Hundredths(231)));
    assert_eq!(gaps.young_minus_old_change, Some(Hundredths(-848)));
}

#[test]
fn true_positive_table_ingests() {
    let t = TpTable::from_csv(TABLE2).unwrap();
    // rows are re-ordered by class index; SCC is index 7
    assert_eq!(t.get(7, 0), Some(53));
    assert_eq!(t.get(7, 9), Some(70));
    assert_eq!(t.get(1, 9), Some(49));
    assert_eq!(t.counts.len(), 8);
}
